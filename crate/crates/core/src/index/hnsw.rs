//! Hierarchical navigable small-world graph for approximate search.
//!
//! Removal tombstones a node; tombstoned nodes still route searches but are
//! never returned. The owner rebuilds the graph once tombstones dominate.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use crate::embedding::Metric;

#[derive(Debug, Clone, Copy)]
struct Scored {
    dist: f64,
    node: usize,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.node.cmp(&other.node))
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: String,
    vector: Vec<f32>,
    links: Vec<Vec<usize>>,
    deleted: bool,
}

#[derive(Debug, Clone)]
pub struct Hnsw {
    metric: Metric,
    m: usize,
    ef_construction: usize,
    level_mult: f64,
    nodes: Vec<Node>,
    by_id: HashMap<String, usize>,
    entry: Option<usize>,
    deleted: usize,
}

impl Hnsw {
    pub fn new(metric: Metric, m: usize, ef_construction: usize) -> Self {
        let m = m.max(2);
        Self {
            metric,
            m,
            ef_construction: ef_construction.max(m),
            level_mult: 1.0 / (m as f64).ln(),
            nodes: Vec::new(),
            by_id: HashMap::new(),
            entry: None,
            deleted: 0,
        }
    }

    pub fn live(&self) -> usize {
        self.by_id.len()
    }

    pub fn tombstones(&self) -> usize {
        self.deleted
    }

    /// Smaller is closer for every metric.
    fn distance(&self, a: &[f32], b: &[f32]) -> f64 {
        match self.metric {
            Metric::L2 => crate::embedding::l2(a, b),
            Metric::Cosine => 1.0 - crate::embedding::cosine(a, b),
        }
    }

    /// Level drawn from a hash of the id so graphs are reproducible.
    fn level_for(&self, id: &str) -> usize {
        let h = xxhash_rust::xxh3::xxh3_64_with_seed(id.as_bytes(), 0x9e37_79b9);
        let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        (-u.ln() * self.level_mult).floor() as usize
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.m * 2
        } else {
            self.m
        }
    }

    pub fn insert(&mut self, id: &str, vector: &[f32]) {
        self.remove(id);
        let level = self.level_for(id);
        let new = self.nodes.len();
        self.nodes.push(Node {
            id: id.to_string(),
            vector: vector.to_vec(),
            links: vec![Vec::new(); level + 1],
            deleted: false,
        });
        self.by_id.insert(id.to_string(), new);

        let Some(entry) = self.entry else {
            self.entry = Some(new);
            return;
        };
        let top = self.nodes[entry].links.len() - 1;
        let mut cur = Scored {
            dist: self.distance(vector, &self.nodes[entry].vector),
            node: entry,
        };
        for layer in (level + 1..=top).rev() {
            cur = self.greedy(vector, cur, layer);
        }
        let mut eps = vec![cur];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(vector, &eps, self.ef_construction, layer);
            let neighbors: Vec<usize> = found.iter().take(self.m).map(|s| s.node).collect();
            self.nodes[new].links[layer] = neighbors.clone();
            for nb in neighbors {
                self.nodes[nb].links[layer].push(new);
                if self.nodes[nb].links[layer].len() > self.max_links(layer) {
                    self.shrink(nb, layer);
                }
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(new);
        }
    }

    fn shrink(&mut self, node: usize, layer: usize) {
        let base = self.nodes[node].vector.clone();
        let mut scored: Vec<Scored> = self.nodes[node].links[layer]
            .iter()
            .map(|&n| Scored {
                dist: self.distance(&base, &self.nodes[n].vector),
                node: n,
            })
            .collect();
        scored.sort();
        scored.truncate(self.max_links(layer));
        self.nodes[node].links[layer] = scored.into_iter().map(|s| s.node).collect();
    }

    pub fn remove(&mut self, id: &str) -> bool {
        match self.by_id.remove(id) {
            Some(n) => {
                self.nodes[n].deleted = true;
                self.deleted += 1;
                true
            }
            None => false,
        }
    }

    fn greedy(&self, query: &[f32], mut cur: Scored, layer: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in &self.nodes[cur.node].links[layer] {
                let d = Scored {
                    dist: self.distance(query, &self.nodes[n].vector),
                    node: n,
                };
                if d < cur {
                    cur = d;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes sorted closest first.
    fn search_layer(&self, query: &[f32], eps: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited: HashSet<usize> = eps.iter().map(|s| s.node).collect();
        let mut frontier: BinaryHeap<std::cmp::Reverse<Scored>> =
            eps.iter().copied().map(std::cmp::Reverse).collect();
        let mut best: BinaryHeap<Scored> = eps.iter().copied().collect();
        while let Some(std::cmp::Reverse(c)) = frontier.pop() {
            if best.len() >= ef && best.peek().is_some_and(|w| c > *w) {
                break;
            }
            for &n in self.nodes[c.node].links.get(layer).into_iter().flatten() {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored {
                    dist: self.distance(query, &self.nodes[n].vector),
                    node: n,
                };
                if best.len() < ef || best.peek().is_some_and(|w| s < *w) {
                    frontier.push(std::cmp::Reverse(s));
                    best.push(s);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Approximate nearest live ids, closest first, with their distances.
    pub fn search(&self, query: &[f32], n: usize, ef: usize) -> Vec<(&str, f64)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let top = self.nodes[entry].links.len() - 1;
        let mut cur = Scored {
            dist: self.distance(query, &self.nodes[entry].vector),
            node: entry,
        };
        for layer in (1..=top).rev() {
            cur = self.greedy(query, cur, layer);
        }
        // widen the beam to absorb tombstones
        let ef = ef.max(n) + self.deleted.min(ef.max(n));
        self.search_layer(query, &[cur], ef, 0)
            .into_iter()
            .filter(|s| !self.nodes[s.node].deleted)
            .take(n)
            .map(|s| (self.nodes[s.node].id.as_str(), s.dist))
            .collect()
    }
}
