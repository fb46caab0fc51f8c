use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{hit_rate_at_k, mean, precision_at_k, rouge_l};
use crate::corpus::{Document, QaRecord};
use crate::embedding::embed_text;
use crate::engine::{Engine, EngineError};
use crate::generation::{assemble_prompt, generate_answer};
use crate::index::{EditMeta, HybridIndex};
use crate::retrieval::{
    fuse_all, merged_ranking, prune_all, rewrite_query, rrf_fuse, Evidence, FusionParams,
    FusionWeights, MissingRank, SourceRanks, SubQueryContext,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full pipeline: rewriting, path + sparse coarse retrieval, fusion,
    /// pruning.
    Pipeline,
    /// Dense text vectors only.
    Vss,
    /// BM25 only.
    Sparse,
    /// Dense and BM25 lists fused with equal weights.
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pipeline, Method::Vss, Method::Sparse, Method::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pipeline => "pipeline",
            Method::Vss => "vss",
            Method::Sparse => "sparse",
            Method::Hybrid => "hybrid",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected pipeline, vss, sparse or hybrid)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub ks: Vec<usize>,
    pub generation_k: usize,
    pub generate: bool,
    /// Queries evaluated at once.
    pub concurrency: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            ks: vec![3, 5, 10],
            generation_k: 5,
            generate: true,
            concurrency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    pub reference_answer: String,
    pub gold_doc_id: String,
    pub g_q: Vec<String>,
    pub retrieved: BTreeMap<usize, Vec<String>>,
    pub hit: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub retrieval_s: f64,
    pub generation_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub hit: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    pub rouge_l: Option<f64>,
    pub bertscore: String,
    pub generation_failures: usize,
    pub timings: Timings,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub queries: usize,
    pub evaluated: usize,
    /// Questions whose gold document is not in the index.
    pub skipped: Vec<String>,
    pub index_construction_s: Option<f64>,
    pub config: BenchmarkConfig,
    pub engine_config: serde_json::Value,
    pub methods: Vec<MethodReport>,
}

/// All chunk ids of the gold document, from the index registry.
pub fn ground_truth(index: &HybridIndex, gold_doc_id: &str) -> BTreeSet<String> {
    index
        .document(gold_doc_id)
        .map(|d| d.chunk_ids.clone())
        .unwrap_or_default()
}

fn rank_baseline(engine: &Engine, method: Method, q: &str, k: usize) -> Result<Vec<String>, EngineError> {
    let index = engine.read();
    let dense = || -> Result<_, EngineError> {
        let v = embed_text(&[q], engine.embedder())
            .map_err(crate::retrieval::RetrievalError::from)?
            .remove(0);
        Ok(index.search_dense(&v, k))
    };
    let ids = |hits: Vec<crate::index::RankedHit>| hits.into_iter().map(|h| h.chunk_id).collect();
    Ok(match method {
        Method::Vss => ids(dense()?),
        Method::Sparse => ids(index.search_sparse(q, k)),
        Method::Hybrid => {
            let mut ranks: BTreeMap<String, SourceRanks> = BTreeMap::new();
            for h in dense()? {
                ranks.entry(h.chunk_id).or_default().sem = Some(h.rank);
            }
            for h in index.search_sparse(q, k) {
                ranks.entry(h.chunk_id).or_default().sparse = Some(h.rank);
            }
            let items: Vec<(String, SourceRanks)> = ranks.into_iter().collect();
            let params = FusionParams {
                weights: FusionWeights {
                    tag: 0.0,
                    sem: 0.5,
                    sparse: 0.5,
                },
                eta: engine.config().retrieval.eta,
                missing: MissingRank::Zero,
            };
            rrf_fuse(&items, k, &params).into_iter().map(|h| h.chunk_id).collect()
        }
        Method::Pipeline => unreachable!("pipeline ranks through the retrieval module"),
    })
}

struct QueryResult {
    record: EvalRecord,
    retrieval_s: f64,
    generation_s: f64,
    generation_failed: bool,
}

fn evaluate_one(
    engine: &Engine,
    method: Method,
    qa: &QaRecord,
    g_q: &BTreeSet<String>,
    config: &BenchmarkConfig,
) -> Result<QueryResult, EngineError> {
    let q = qa.question.as_str();
    let mut record = EvalRecord {
        question: qa.question.clone(),
        reference_answer: qa.answer.clone(),
        gold_doc_id: qa.doc_id.clone(),
        g_q: g_q.iter().cloned().collect(),
        retrieved: BTreeMap::new(),
        hit: BTreeMap::new(),
        precision: BTreeMap::new(),
        answer: None,
        rouge_l: None,
        generation_error: None,
    };
    let base = engine.config().retrieval.clone();
    let t = Instant::now();
    let sub_queries = match method {
        Method::Pipeline => rewrite_query(q, &base, engine.agents()),
        _ => Vec::new(),
    };
    for &k in &config.ks {
        let ranking = match method {
            Method::Pipeline => {
                let cfg = crate::retrieval::RetrievalConfig { k, ..base.clone() };
                let fused = fuse_all(&sub_queries, &engine.read(), engine.embedder(), &cfg)?;
                let contexts: Vec<SubQueryContext> = sub_queries
                    .iter()
                    .zip(fused)
                    .map(|(s, (candidates, fused))| SubQueryContext {
                        sub_query: s.clone(),
                        candidates,
                        fused,
                        pruned: Vec::new(),
                    })
                    .collect();
                let mut r = merged_ranking(&contexts);
                r.truncate(k);
                r
            }
            m => rank_baseline(engine, m, q, k)?,
        };
        let hit = hit_rate_at_k(&ranking, g_q, k).expect("g_q checked non-empty");
        let precision = precision_at_k(&ranking, g_q, k).expect("g_q checked non-empty");
        record.hit.insert(k, hit);
        record.precision.insert(k, precision);
        record.retrieved.insert(k, ranking);
    }
    let retrieval_s = t.elapsed().as_secs_f64();

    let mut generation_s = 0.0;
    let mut generation_failed = false;
    if config.generate {
        let t = Instant::now();
        let k = config.generation_k;
        let agents = engine.agents();
        let contexts = match method {
            Method::Pipeline => {
                let cfg = crate::retrieval::RetrievalConfig { k, ..base.clone() };
                let fused = fuse_all(&sub_queries, &engine.read(), engine.embedder(), &cfg)?;
                prune_all(q, sub_queries.clone(), fused, &cfg, agents)
            }
            m => {
                let ids = rank_baseline(engine, m, q, k)?;
                let index = engine.read();
                let pruned = ids
                    .iter()
                    .filter_map(|id| {
                        let (chunk, path) = index.chunk(id)?;
                        Some(Evidence {
                            chunk_id: id.clone(),
                            doc_id: chunk.doc_id.clone(),
                            path: path.display(),
                            text: chunk.text.clone(),
                            pruned: false,
                        })
                    })
                    .collect();
                vec![SubQueryContext {
                    sub_query: q.to_string(),
                    candidates: Vec::new(),
                    fused: Vec::new(),
                    pruned,
                }]
            }
        };
        let prompt = assemble_prompt(q, &contexts, &agents.templates.answer, engine.config().prompt_budget);
        match generate_answer(&prompt, &*agents.generator, &agents.retry, agents.temperature) {
            Ok(a) => {
                record.rouge_l = Some(rouge_l(&a.text, &qa.answer));
                record.answer = Some(a.text);
            }
            Err(e) => {
                generation_failed = true;
                record.generation_error = Some(e.to_string());
            }
        }
        generation_s = t.elapsed().as_secs_f64();
    }
    Ok(QueryResult {
        record,
        retrieval_s,
        generation_s,
        generation_failed,
    })
}

/// Ingests `docs` (timed as index construction; pass none to evaluate an
/// already built engine), then scores each method on every QA record whose
/// gold document is indexed.
pub fn run_benchmark(
    engine: &Engine,
    docs: Vec<Document>,
    qa: &[QaRecord],
    methods: &[Method],
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport, EngineError> {
    if config.ks.is_empty() || config.ks.contains(&0) || config.generation_k == 0 {
        return Err(EngineError::Invalid("every k must be at least 1".into()));
    }
    let index_construction_s = if docs.is_empty() {
        None
    } else {
        let t = Instant::now();
        engine.ingest(
            docs,
            &EditMeta {
                actor: "benchmark".into(),
                at_ms: 0,
            },
        )?;
        Some(t.elapsed().as_secs_f64())
    };

    let mut skipped = Vec::new();
    let mut jobs: Vec<(&QaRecord, BTreeSet<String>)> = Vec::new();
    {
        let index = engine.read();
        for r in qa {
            let g_q = ground_truth(&index, &r.doc_id);
            if g_q.is_empty() {
                skipped.push(r.question.clone());
            } else {
                jobs.push((r, g_q));
            }
        }
    }

    let mut reports = Vec::new();
    for &method in methods {
        let results: Vec<QueryResult> = crate::par::parallel_map(&jobs, config.concurrency, |(r, g_q)| {
            evaluate_one(engine, method, r, g_q, config)
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        let mut hit = BTreeMap::new();
        let mut precision = BTreeMap::new();
        for &k in &config.ks {
            let h: Vec<f64> = results.iter().map(|r| r.record.hit[&k]).collect();
            let p: Vec<f64> = results.iter().map(|r| r.record.precision[&k]).collect();
            hit.insert(k, mean(&h).unwrap_or(0.0));
            precision.insert(k, mean(&p).unwrap_or(0.0));
        }
        let rouge: Vec<f64> = results.iter().filter_map(|r| r.record.rouge_l).collect();
        reports.push(MethodReport {
            method,
            hit,
            precision,
            rouge_l: mean(&rouge),
            bertscore: "not computed".into(),
            generation_failures: results.iter().filter(|r| r.generation_failed).count(),
            timings: Timings {
                retrieval_s: results.iter().map(|r| r.retrieval_s).sum(),
                generation_s: results.iter().map(|r| r.generation_s).sum(),
            },
            records: results.into_iter().map(|r| r.record).collect(),
        });
    }

    Ok(BenchmarkReport {
        queries: qa.len(),
        evaluated: jobs.len(),
        skipped,
        index_construction_s,
        config: config.clone(),
        engine_config: serde_json::to_value(engine.config()).expect("config serializes"),
        methods: reports,
    })
}

impl BenchmarkReport {
    /// Aligned plain-text table: Hit and Prec. per k, then ROUGE-L, then
    /// timings.
    pub fn render_table(&self) -> String {
        let ks = &self.config.ks;
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "");
        for k in ks {
            let _ = write!(out, " {:^15}", format!("k={k}"));
        }
        let _ = writeln!(out, " {:>8} {:>10} {:>9} {:>9}", "", "", "", "");
        let _ = write!(out, "{:<10}", "Method");
        for _ in ks {
            let _ = write!(out, " {:>7} {:>7}", "Hit", "Prec.");
        }
        let _ = writeln!(out, " {:>8} {:>10} {:>9} {:>9}", "ROUGE-L", "BERTScore", "Retr.(s)", "Gen.(s)");
        for m in &self.methods {
            let _ = write!(out, "{:<10}", m.method.name());
            for k in ks {
                let _ = write!(out, " {:>7.3} {:>7.3}", m.hit[k], m.precision[k]);
            }
            let rouge = m.rouge_l.map_or("-".to_string(), |r| format!("{r:.3}"));
            let _ = writeln!(
                out,
                " {:>8} {:>10} {:>9.3} {:>9.3}",
                rouge, "n/c", m.timings.retrieval_s, m.timings.generation_s
            );
        }
        if let Some(s) = self.index_construction_s {
            let _ = writeln!(out, "index construction: {s:.3} s");
        }
        let _ = writeln!(
            out,
            "queries: {} evaluated, {} skipped (gold document not indexed)",
            self.evaluated,
            self.skipped.len()
        );
        out
    }
}
