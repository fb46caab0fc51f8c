#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signpost::corpus::{load_corpus, CorpusSchema, Document};
use signpost::embedding::HashedEmbedder;
use signpost::index::{AnnSettings, EditMeta};
use signpost::llm::{CompletionClient, RetryPolicy, ScriptedClient};
use signpost::tagging::HeuristicTagger;
use signpost::{Agents, Engine, EngineConfig};

pub const DIM: usize = 64;

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn toy_docs() -> Vec<Document> {
    load_corpus(&toy_dir().join("docs"), CorpusSchema::Profiles).expect("toy corpus loads")
}

pub fn toy_client() -> Arc<ScriptedClient> {
    let raw = std::fs::read_to_string(toy_dir().join("llm.json")).unwrap();
    Arc::new(ScriptedClient::from_json(&raw).expect("llm fixture parses"))
}

pub fn meta() -> EditMeta {
    EditMeta {
        actor: "tester".into(),
        at_ms: 0,
    }
}

pub fn exact_config() -> EngineConfig {
    EngineConfig {
        ann: AnnSettings::exact(),
        ..EngineConfig::default()
    }
}

/// Scripted seats retry without sleeping.
pub fn agents(client: Arc<dyn CompletionClient>) -> Agents {
    let mut agents = Agents::uniform(client);
    agents.retry = RetryPolicy {
        attempts: 2,
        base_delay_ms: 0,
    };
    agents
}

pub fn engine_with(config: EngineConfig, client: Arc<dyn CompletionClient>) -> Engine {
    Engine::new(
        config,
        Arc::new(HashedEmbedder::new(DIM)),
        Arc::new(HeuristicTagger::new()),
        agents(client),
    )
    .unwrap()
}

pub fn null_engine() -> Engine {
    Engine::new(
        exact_config(),
        Arc::new(HashedEmbedder::new(DIM)),
        Arc::new(HeuristicTagger::new()),
        Agents::null(),
    )
    .unwrap()
}

/// Toy corpus ingested into an engine backed by the scripted fixture.
pub fn toy_engine() -> (Engine, Arc<ScriptedClient>) {
    let client = toy_client();
    let engine = engine_with(exact_config(), client.clone());
    engine.ingest(toy_docs(), &meta()).unwrap();
    (engine, client)
}

/// Pseudo-words drawn from a fixed syllable set.
pub fn vocabulary(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const SYL: &[&str] = &[
        "ka", "lo", "mi", "ra", "te", "su", "no", "vi", "de", "ba", "qu", "zen", "tor", "pal", "gri",
        "mon",
    ];
    let mut words: Vec<String> = Vec::new();
    while words.len() < n {
        let len = rng.gen_range(2..=4);
        let w: String = (0..len).map(|_| *SYL.choose(rng).unwrap()).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// Documents of exactly `chunks_per_doc` windows each at the default
/// 500-char window: lengths fall in `(500(n-1), 500n - 50]`, and snapped
/// windows are never shorter than 450 chars.
pub fn synthetic_corpus(seed: u64, docs: usize, chunks_per_doc: usize) -> Vec<Document> {
    assert!(chunks_per_doc >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = vocabulary(&mut rng, 400);
    let limit = chunks_per_doc * 500 - 50;
    (0..docs)
        .map(|d| {
            let mut text = String::new();
            while text.len() < limit {
                let n = rng.gen_range(6..14);
                let sentence: Vec<&str> = (0..n).map(|_| vocab.choose(&mut rng).unwrap().as_str()).collect();
                text.push_str(&sentence.join(" "));
                text.push_str(". ");
            }
            text.truncate(limit);
            let cut = text.rfind(' ').unwrap_or(limit);
            text.truncate(cut);
            Document::new(format!("syn-{d:05}"), text)
        })
        .collect()
}
