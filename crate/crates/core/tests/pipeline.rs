mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;

use signpost::corpus::{load_qa, Document};
use signpost::embedding::{embed_text, HashedEmbedder};
use signpost::engine::{EngineError, IngestReport};
use signpost::index::{EditAction, IndexError, TagScope};
use signpost::llm::{AgentRole, NullClient, ScriptedClient};
use signpost::prompts::PromptTemplates;
use signpost::tagging::{generate_master_tags, HeuristicTagger, LlmTagger, Tagger};
use signpost::{Agents, Engine, EngineConfig, QueryOptions};

fn retrieval_only() -> QueryOptions {
    QueryOptions {
        k: None,
        generate: false,
    }
}

fn chunk_count(r: &IngestReport) -> usize {
    r.documents.iter().map(|d| d.chunk_ids.len()).sum()
}

#[test]
fn heuristic_master_tags_name_the_bank() {
    let docs = common::toy_docs();
    let bdo = docs.iter().find(|d| d.doc_id == "bdo-unibank").unwrap();
    assert_eq!(bdo.title, "BDO Unibank");
    assert_eq!(bdo.metadata["ticker"], "BDO");

    let fresh = HeuristicTagger::new();
    let tags = generate_master_tags(bdo, 5, &fresh).unwrap();
    assert!(tags.len() <= 5);
    assert_eq!(tags[0].as_str(), "bdo unibank");

    let informed = HeuristicTagger::new();
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    informed.observe(&texts);
    let tags = generate_master_tags(bdo, 5, &informed).unwrap();
    assert!(tags.iter().any(|t| t.as_str() == "bdo unibank"), "{tags:?}");
}

#[test]
fn chunks_of_a_document_share_master_tags() {
    let (engine, _) = common::toy_engine();
    let index = engine.read();
    for doc_id in index.documents().keys() {
        let ids = index.doc_chunks(doc_id).unwrap();
        let masters: BTreeSet<Vec<String>> = ids
            .iter()
            .map(|id| index.chunk(id).unwrap().1.master.iter().map(|t| t.to_string()).collect())
            .collect();
        assert_eq!(masters.len(), 1, "{doc_id}");
        for id in ids {
            let path = index.chunk(&id).unwrap().1;
            assert!(path.paragraph.len() <= 3, "{id}: {path}");
            assert!(path.paragraph.iter().all(|t| !path.master.iter().any(|m| m.same_as(t))));
        }
    }
    index.check_consistency().unwrap();
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[test]
fn retrieval_without_agents_matches_hand_fusion() {
    let mut config = common::exact_config();
    config.retrieval.expansion_enabled = false;
    config.retrieval.pruning_enabled = false;
    let engine = common::engine_with(config, common::toy_client());
    engine.ingest(common::toy_docs(), &common::meta()).unwrap();
    let e = HashedEmbedder::new(common::DIM);
    let qa = load_qa(&common::toy_dir().join("qa.jsonl")).unwrap();

    for k in [1, 3, 5, 10] {
        for rec in &qa {
            let q = rec.question.as_str();
            let out = engine
                .query(q, QueryOptions { k: Some(k), generate: false })
                .unwrap();
            assert_eq!(out.sub_queries, vec![q.to_string()]);

            let index = engine.read();
            let qv = embed_text(&[q], &e).unwrap().remove(0);
            // coarse union: 3k path hits, ceil(2k/5) sparse hits
            let mut ranks: BTreeMap<String, [Option<usize>; 3]> = BTreeMap::new();
            for h in index.search_tag(&qv, 3 * k) {
                ranks.entry(h.chunk_id).or_default()[0] = Some(h.rank);
            }
            for h in index.search_sparse(q, (2 * k).div_ceil(5)) {
                ranks.entry(h.chunk_id).or_default()[2] = Some(h.rank);
            }
            let mut by_cos: Vec<(f64, String)> = ranks
                .keys()
                .map(|id| (cosine(&qv, index.dense_store().get(id).unwrap()), id.clone()))
                .collect();
            by_cos.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (i, (_, id)) in by_cos.iter().enumerate() {
                ranks.get_mut(id).unwrap()[1] = Some(i + 1);
            }
            let w = [0.25, 0.25, 0.5];
            let mut want: Vec<(f64, usize, String)> = ranks
                .iter()
                .map(|(id, r)| {
                    let s = (0..3).map(|j| r[j].map_or(0.0, |r| w[j] / (60.0 + r as f64))).sum::<f64>();
                    (s, r.iter().flatten().count(), id.clone())
                })
                .collect();
            want.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
            want.truncate(k);

            let got = &out.contexts[0].fused;
            assert_eq!(got.len(), want.len(), "{q} k={k}");
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.chunk_id, w.2, "{q} k={k}");
                assert!((g.score - w.0).abs() < 1e-12);
            }
            let pruned: Vec<&str> = out.contexts[0].pruned.iter().map(|e| e.chunk_id.as_str()).collect();
            let fused: Vec<&str> = got.iter().map(|h| h.chunk_id.as_str()).collect();
            assert_eq!(pruned, fused);
            assert_eq!(out.ranking, fused.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        }
    }
}

#[test]
fn every_prune_request_carries_the_chunk_path() {
    let (engine, client) = common::toy_engine();
    engine
        .query("What was BDO Unibank net income in 2023?", retrieval_only())
        .unwrap();
    let index = engine.read();
    let requests: Vec<_> = client.requests().into_iter().filter(|r| r.role == AgentRole::Pruner).collect();
    assert!(!requests.is_empty());
    for r in &requests {
        let (chunk, path) = index
            .chunk_ids()
            .filter_map(|id| index.chunk(id))
            .find(|(c, _)| r.user.contains(&format!("Chunk:\n{}", c.text)))
            .expect("request names an indexed chunk");
        let anchor = format!("Path: {}\nChunk:\n{}", path.display(), chunk.text);
        assert!(r.user.contains(&anchor), "{}", r.user);
        assert!(r.user.contains("Original Query: What was BDO Unibank net income in 2023?"));
    }
}

#[test]
fn agent_outcomes_shape_the_contexts() {
    let (engine, _) = common::toy_engine();
    let out = engine
        .query("What was BDO Unibank net income in 2023?", retrieval_only())
        .unwrap();
    // the lowercase duplicate of the question is dropped, order kept
    assert_eq!(
        out.sub_queries,
        ["What was BDO Unibank net income in 2023?", "BDO Unibank net income 2023", "BDO Unibank profit"]
    );
    // empty pruner output removes every chunk of the last block
    assert!(!out.contexts[2].fused.is_empty());
    assert!(out.contexts[2].pruned.is_empty());
    // pruned text replaces the chunk, failures pass it through unchanged
    let first = &out.contexts[0].pruned;
    let cut = first.iter().find(|e| e.chunk_id == "bdo-unibank#0").unwrap();
    assert!(cut.pruned);
    assert_eq!(cut.text, "BDO Unibank reported net income of 74.4 billion pesos in 2023.");
    let index = engine.read();
    for ev in first.iter().filter(|e| !e.pruned) {
        assert_eq!(ev.text, index.chunk(&ev.chunk_id).unwrap().0.text);
    }

    // unparseable rewriter output degrades to the question alone
    let q = "What was Selat Palm Oil crude palm oil output in 2023?";
    let out = engine.query(q, retrieval_only()).unwrap();
    assert_eq!(out.sub_queries, [q]);
}

#[test]
fn generation_uses_the_pruned_contexts() {
    let (engine, _) = common::toy_engine();
    let out = engine
        .query("How many subscribers does Andaman Telecom serve?", QueryOptions { k: Some(3), generate: true })
        .unwrap();
    let prompt = out.prompt.unwrap();
    let answer = out.answer.unwrap();
    assert_eq!(answer.text, "31 million subscribers");
    assert_eq!(answer.prompt_fingerprint, prompt.fingerprint);
    let survivors: Vec<String> = out.contexts[0].pruned.iter().map(|e| e.chunk_id.clone()).collect();
    assert_eq!(answer.contexts_used[0].chunk_ids, survivors);
    assert_eq!(survivors, ["andaman-telecom#0"]);
    assert!(prompt.user.contains("Question: How many subscribers does Andaman Telecom serve?"));
}

#[test]
fn persisted_index_reopens_with_identical_answers() {
    let (engine, _) = common::toy_engine();
    let dir = tempfile::tempdir().unwrap();
    engine.persist(dir.path()).unwrap();

    let reopened = Engine::open(
        dir.path(),
        common::exact_config(),
        Arc::new(HashedEmbedder::new(common::DIM)),
        Arc::new(HeuristicTagger::new()),
        common::agents(common::toy_client()),
    )
    .unwrap();
    let config = &engine.config().retrieval;
    for q in ["What was BDO Unibank net income in 2023?", "solar capacity", "copper"] {
        let a = engine.query(q, retrieval_only()).unwrap().trace(q, config).to_json();
        let b = reopened.query(q, retrieval_only()).unwrap().trace(q, config).to_json();
        assert_eq!(a, b);
    }
    assert_eq!(reopened.read().editlog(), engine.read().editlog());

    let other = Engine::open(
        dir.path(),
        common::exact_config(),
        Arc::new(HashedEmbedder::new(common::DIM * 2)),
        Arc::new(HeuristicTagger::new()),
        Agents::null(),
    );
    assert!(matches!(other, Err(EngineError::Index(IndexError::FingerprintMismatch { .. }))));
}

#[test]
fn ingest_and_queries_interleave() {
    let engine = Arc::new(common::null_engine());
    engine.ingest(common::toy_docs(), &common::meta()).unwrap();
    let extra = common::synthetic_corpus(11, 24, 2);
    thread::scope(|s| {
        let writer = {
            let engine = engine.clone();
            s.spawn(move || {
                for batch in extra.chunks(4) {
                    engine.ingest(batch.to_vec(), &common::meta()).unwrap();
                }
            })
        };
        let readers: Vec<_> = (0..3)
            .map(|i| {
                let engine = engine.clone();
                s.spawn(move || {
                    for j in 0..20 {
                        let q = ["bank net income", "copper tonnes", "solar capacity"][(i + j) % 3];
                        let out = engine.query(q, retrieval_only()).unwrap();
                        assert!(!out.ranking.is_empty());
                    }
                })
            })
            .collect();
        writer.join().unwrap();
        for r in readers {
            r.join().unwrap();
        }
    });
    let index = engine.read();
    index.check_consistency().unwrap();
    assert_eq!(index.documents().len(), 6 + 24);
    assert_eq!(index.editlog().len(), 1 + 6);
}

#[test]
fn reingest_replaces_and_logs_once() {
    let engine = common::null_engine();
    let docs = common::toy_docs();
    let first = engine.ingest(docs.clone(), &common::meta()).unwrap();
    assert!(first.documents.iter().all(|d| !d.replaced));

    let mut bdo = docs.into_iter().find(|d| d.doc_id == "bdo-unibank").unwrap();
    bdo.text = "BDO Unibank is a bank.".into();
    let second = engine.ingest(vec![bdo], &common::meta()).unwrap();
    assert!(second.documents[0].replaced);
    assert_eq!(second.documents[0].chunk_ids, ["bdo-unibank#0"]);
    assert!(chunk_count(&first) > chunk_count(&second));

    let index = engine.read();
    assert_eq!(index.doc_chunks("bdo-unibank").unwrap(), ["bdo-unibank#0"]);
    assert!(index.chunk("bdo-unibank#1").is_none());
    let log = index.editlog();
    assert_eq!(log.len(), 2);
    assert_eq!(log[1].action, EditAction::Ingest);
    assert_eq!(log[1].target, "bdo-unibank");
    index.check_consistency().unwrap();
}

#[test]
fn rejected_batches_leave_the_index_untouched() {
    let engine = common::null_engine();
    let dup = vec![Document::new("a", "alpha text"), Document::new("a", "beta text")];
    assert!(matches!(engine.ingest(dup, &common::meta()), Err(EngineError::Invalid(_))));
    let empty = vec![Document::new("a", "alpha"), Document::new("b", "")];
    assert!(matches!(engine.ingest(empty, &common::meta()), Err(EngineError::Invalid(_))));

    let llm_tagged = Engine::new(
        common::exact_config(),
        Arc::new(HashedEmbedder::new(common::DIM)),
        Arc::new(LlmTagger::new(
            NullClient,
            PromptTemplates::default().master_tags,
            PromptTemplates::default().paragraph_tags,
        )),
        Agents::null(),
    )
    .unwrap();
    let err = llm_tagged.ingest(common::toy_docs(), &common::meta()).unwrap_err();
    assert!(err.is_backend(), "{err}");
    for e in [&engine, &llm_tagged] {
        assert!(e.read().is_empty());
        assert!(e.read().editlog().is_empty());
    }
}

#[test]
fn unparseable_paragraph_tags_queue_the_chunk() {
    let client = ScriptedClient::default()
        .rule(AgentRole::MasterTagger, None, r#"["BDO Unibank", "Universal Banking!!", "universal banking"]"#)
        .rule(AgentRole::ParagraphTagger, Some("net income"), "I think the tags are: income")
        .rule(AgentRole::ParagraphTagger, None, r#"["loans", "BDO Unibank"]"#);
    let t = PromptTemplates::default();
    let engine = Engine::new(
        common::exact_config(),
        Arc::new(HashedEmbedder::new(common::DIM)),
        Arc::new(LlmTagger::new(client, t.master_tags, t.paragraph_tags)),
        Agents::null(),
    )
    .unwrap();
    let bdo: Vec<Document> = common::toy_docs().into_iter().filter(|d| d.doc_id == "bdo-unibank").collect();
    let report = engine.ingest(bdo, &common::meta()).unwrap();
    assert_eq!(report.retry_queue.len(), 1);
    let queued = &report.retry_queue[0].chunk_id;

    let index = engine.read();
    for id in index.doc_chunks("bdo-unibank").unwrap() {
        let path = index.chunk(&id).unwrap().1;
        assert_eq!(path.master.iter().map(|t| t.as_str()).collect::<Vec<_>>(), ["BDO Unibank", "Universal Banking"]);
        if &id == queued {
            assert!(path.paragraph.is_empty());
        } else {
            // the duplicate of a master tag is dropped from the paragraph segment
            assert_eq!(path.display(), "BDO Unibank → Universal Banking → loans");
        }
    }
}

#[test]
fn tag_injection_pulls_the_document_towards_the_probe() {
    let (engine, _) = common::toy_engine();
    let probe = "diversified business model";
    let before = engine.probe(probe, "bdo-unibank", TagScope::Document).unwrap();
    let report = engine
        .edit_tag("bdo-unibank", probe, TagScope::Document, true, &common::meta())
        .unwrap();
    assert!(!report.no_op);
    assert_eq!(report.changes.len(), before.len());
    let after = engine.probe(probe, "bdo-unibank", TagScope::Document).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(a.chunk_id, b.chunk_id);
        assert!(a.distance < b.distance, "{} {} -> {}", a.chunk_id, b.distance, a.distance);
        assert!(a.rank <= b.rank);
    }
    let log_len = engine.read().editlog().len();

    // a duplicate injection and removing an absent tag change nothing
    let dup = engine
        .edit_tag("bdo-unibank", "Diversified  Business Model", TagScope::Document, true, &common::meta())
        .unwrap();
    assert!(dup.no_op && dup.changes.is_empty());
    let absent = engine
        .edit_tag("bdo-unibank#0", "never present", TagScope::Chunk, false, &common::meta())
        .unwrap();
    assert!(absent.no_op);
    assert_eq!(engine.read().editlog().len(), log_len);
    assert_eq!(engine.probe(probe, "bdo-unibank", TagScope::Document).unwrap(), after);

    // removal restores the original geometry
    engine
        .edit_tag("bdo-unibank", probe, TagScope::Document, false, &common::meta())
        .unwrap();
    let restored = engine.probe(probe, "bdo-unibank", TagScope::Document).unwrap();
    assert_eq!(restored, before);
    let log = engine.read().editlog().to_vec();
    assert_eq!(log.len(), log_len + 1);
    assert_eq!(log.last().unwrap().action, EditAction::RemoveTag);

    assert!(matches!(
        engine.edit_tag("missing", "x", TagScope::Document, true, &common::meta()),
        Err(EngineError::Index(IndexError::UnknownDocument(_)))
    ));
    assert!(matches!(
        engine.edit_tag("bdo-unibank#0", "!!!", TagScope::Chunk, true, &common::meta()),
        Err(EngineError::Index(IndexError::EmptyTag(_)))
    ));
}

#[test]
fn empty_index_and_empty_query_are_refused() {
    let engine = common::null_engine();
    assert!(matches!(
        engine.query("anything", retrieval_only()),
        Err(EngineError::Retrieval(signpost::retrieval::RetrievalError::EmptyIndex))
    ));
    engine.ingest(common::toy_docs(), &common::meta()).unwrap();
    assert!(matches!(
        engine.query("   ", retrieval_only()),
        Err(EngineError::Retrieval(signpost::retrieval::RetrievalError::EmptyQuery))
    ));
}

#[test]
fn config_round_trips_through_json() {
    let config = EngineConfig::default();
    let json = serde_json::to_string(&config).unwrap();
    assert_eq!(serde_json::from_str::<EngineConfig>(&json).unwrap(), config);
    let partial: EngineConfig = serde_json::from_str(r#"{"chunk_window": 800, "retrieval": {"k": 10}}"#).unwrap();
    assert_eq!(partial.chunk_window, 800);
    assert_eq!(partial.retrieval.k, 10);
    assert_eq!(partial.retrieval.eta, 60.0);
}
