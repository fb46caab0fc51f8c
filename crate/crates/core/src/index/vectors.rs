use std::cmp::Ordering;
use std::collections::HashMap;

use super::hnsw::Hnsw;
use crate::embedding::Metric;

/// When to switch from brute force to the graph index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AnnSettings {
    /// Use the graph once the store holds at least this many vectors;
    /// `None` keeps every search exact.
    pub threshold: Option<usize>,
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for AnnSettings {
    fn default() -> Self {
        Self {
            threshold: Some(20_000),
            m: 16,
            ef_construction: 128,
            ef_search: 96,
        }
    }
}

impl AnnSettings {
    pub fn exact() -> Self {
        Self {
            threshold: None,
            ..Self::default()
        }
    }
}

/// Flat vector store keyed by chunk id, with an optional graph overlay.
#[derive(Debug, Clone)]
pub struct VectorStore {
    dim: usize,
    metric: Metric,
    ann: AnnSettings,
    ids: Vec<String>,
    data: Vec<f32>,
    slots: HashMap<String, usize>,
    graph: Option<Hnsw>,
}

/// Orders `(id, score)` pairs closest first, ties by id ascending.
pub(crate) fn closeness(metric: Metric) -> impl Fn(&(&str, f64), &(&str, f64)) -> Ordering {
    move |a, b| {
        let by_score = if metric.higher_is_closer() {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        by_score.then_with(|| a.0.cmp(b.0))
    }
}

impl VectorStore {
    pub fn new(dim: usize, metric: Metric, ann: AnnSettings) -> Self {
        Self {
            dim,
            metric,
            ann,
            ids: Vec::new(),
            data: Vec::new(),
            slots: HashMap::new(),
            graph: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.slots.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.slots
            .get(id)
            .map(|&s| &self.data[s * self.dim..(s + 1) * self.dim])
    }

    pub fn set_ann(&mut self, ann: AnnSettings) {
        self.ann = ann;
        self.graph = None;
        self.maybe_build_graph();
    }

    /// Inserts or replaces. Caller guarantees `v.len() == dim`.
    pub fn upsert(&mut self, id: &str, v: &[f32]) {
        debug_assert_eq!(v.len(), self.dim);
        match self.slots.get(id) {
            Some(&s) => self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(v),
            None => {
                self.slots.insert(id.to_string(), self.ids.len());
                self.ids.push(id.to_string());
                self.data.extend_from_slice(v);
            }
        }
        if let Some(g) = &mut self.graph {
            g.insert(id, v);
        } else {
            self.maybe_build_graph();
        }
    }

    pub fn remove(&mut self, id: &str) -> bool {
        let Some(slot) = self.slots.remove(id) else {
            return false;
        };
        let last = self.ids.len() - 1;
        if slot != last {
            self.ids.swap(slot, last);
            let (head, tail) = self.data.split_at_mut(last * self.dim);
            head[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(&tail[..self.dim]);
            self.slots.insert(self.ids[slot].clone(), slot);
        }
        self.ids.pop();
        self.data.truncate(last * self.dim);

        let rebuild = match &mut self.graph {
            Some(g) => {
                g.remove(id);
                g.tombstones() > g.live().max(64)
            }
            None => false,
        };
        if rebuild || self.ann.threshold.is_none_or(|t| self.len() < t / 2) {
            self.graph = None;
            self.maybe_build_graph();
        }
        true
    }

    fn ann_active(&self) -> bool {
        self.ann.threshold.is_some_and(|t| self.len() >= t)
    }

    fn maybe_build_graph(&mut self) {
        if self.graph.is_some() || !self.ann_active() {
            return;
        }
        let mut g = Hnsw::new(self.metric, self.ann.m, self.ann.ef_construction);
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|a, b| self.ids[*a].cmp(&self.ids[*b]));
        for s in order {
            g.insert(&self.ids[s], &self.data[s * self.dim..(s + 1) * self.dim]);
        }
        self.graph = Some(g);
    }

    /// Exact scores for every stored vector, closest first.
    pub fn brute_force(&self, query: &[f32], n: usize) -> Vec<(&str, f64)> {
        let mut scored: Vec<(&str, f64)> = self
            .ids
            .iter()
            .enumerate()
            .map(|(s, id)| {
                (
                    id.as_str(),
                    self.metric
                        .score(query, &self.data[s * self.dim..(s + 1) * self.dim]),
                )
            })
            .collect();
        let cmp = closeness(self.metric);
        if n < scored.len() {
            scored.select_nth_unstable_by(n, &cmp);
            scored.truncate(n);
        }
        scored.sort_by(&cmp);
        scored
    }

    pub fn search(&self, query: &[f32], n: usize) -> Vec<(&str, f64)> {
        match (&self.graph, self.ann_active()) {
            (Some(g), true) => {
                let mut hits: Vec<(&str, f64)> = g
                    .search(query, n, self.ann.ef_search)
                    .into_iter()
                    .filter_map(|(id, _)| self.get(id).map(|v| (id, self.metric.score(query, v))))
                    .collect();
                hits.sort_by(closeness(self.metric));
                hits
            }
            _ => self.brute_force(query, n),
        }
    }

    /// 1-based rank `id` would receive in an exhaustive search.
    pub fn rank_of(&self, query: &[f32], id: &str) -> Option<(usize, f64)> {
        let target = (id, self.metric.score(query, self.get(id)?));
        let cmp = closeness(self.metric);
        let ahead = self
            .ids
            .iter()
            .enumerate()
            .filter(|(s, other)| {
                let score = self
                    .metric
                    .score(query, &self.data[s * self.dim..(s + 1) * self.dim]);
                cmp(&(other.as_str(), score), &target) == Ordering::Less
            })
            .count();
        Some((ahead + 1, target.1))
    }
}
