use std::collections::{BTreeSet, HashSet};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("ground-truth set is empty")]
    EmptyGroundTruth,
    #[error("k must be at least 1")]
    ZeroK,
}

fn relevant_in_top_k<S: AsRef<str>>(
    retrieved: &[S],
    g_q: &BTreeSet<String>,
    k: usize,
) -> Result<usize, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if g_q.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let top: HashSet<&str> = retrieved.iter().take(k).map(AsRef::as_ref).collect();
    Ok(top.into_iter().filter(|id| g_q.contains(*id)).count())
}

/// 1 when any of the first `k` retrieved ids is in `g_q`, else 0.
pub fn hit_rate_at_k<S: AsRef<str>>(
    retrieved: &[S],
    g_q: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    Ok(if relevant_in_top_k(retrieved, g_q, k)? > 0 { 1.0 } else { 0.0 })
}

/// Distinct relevant ids among the first `k`, divided by `k` even when fewer
/// than `k` ids were retrieved.
pub fn precision_at_k<S: AsRef<str>>(
    retrieved: &[S],
    g_q: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    Ok(relevant_in_top_k(retrieved, g_q, k)? as f64 / k as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F1 over lowercased whitespace-separated tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let tokens = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_lowercase).collect() };
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
