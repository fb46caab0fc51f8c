//! Serializable record of one query: Q', per-source candidates, fused
//! scores, pruned survivors and the optional answer.

use serde::{Deserialize, Serialize};

use crate::engine::QueryOutcome;
use crate::generation::Answer;
use crate::retrieval::{FusionWeights, MissingRank, RetrievalConfig, SubQueryContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    pub k: usize,
    pub tag_fanout: usize,
    pub sparse_fanout: usize,
    pub weights: FusionWeights,
    pub eta: f64,
    pub missing_rank: MissingRank,
    pub expansion_enabled: bool,
    pub pruning_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDebugTrace {
    pub query: String,
    pub settings: TraceSettings,
    pub sub_queries: Vec<String>,
    pub contexts: Vec<SubQueryContext>,
    pub ranking: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
}

impl QueryDebugTrace {
    pub fn new(query: &str, config: &RetrievalConfig, outcome: &QueryOutcome) -> Self {
        Self {
            query: query.to_string(),
            settings: TraceSettings {
                k: config.k,
                tag_fanout: config.tag_fanout(),
                sparse_fanout: config.sparse_fanout(),
                weights: config.weights,
                eta: config.eta,
                missing_rank: config.missing_rank,
                expansion_enabled: config.expansion_enabled,
                pruning_enabled: config.pruning_enabled,
            },
            sub_queries: outcome.sub_queries.clone(),
            contexts: outcome.contexts.clone(),
            ranking: outcome.ranking.clone(),
            prompt_fingerprint: outcome.prompt.as_ref().map(|p| p.fingerprint.clone()),
            answer: outcome.answer.clone(),
        }
    }

    /// Pretty JSON with a trailing newline; stable for identical inputs.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }
}
