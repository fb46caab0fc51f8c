mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use signpost::corpus::{segment_document, Chunk, Document};
use signpost::embedding::{embed_path, embed_paths, embed_text, HashedEmbedder, PathEmbedding};
use signpost::eval::{hit_rate_at_k, precision_at_k, rouge_l};
use signpost::generation::assemble_prompt;
use signpost::index::{AnnSettings, IndexSettings, TagScope};
use signpost::prompts::PromptTemplates;
use signpost::retrieval::{
    merge_subqueries, rrf_fuse, rrf_score, Evidence, FusionParams, FusionWeights, MissingRank,
    SourceRanks, SubQueryContext, MAX_SUBQUERY_WORDS,
};
use signpost::tagging::{build_path, normalize_tags, SemanticPath, Tag};
use signpost::{AugmentedChunk, HybridIndex};

const WORDS: &[&str] = &[
    "bank", "copper", "palm", "oil", "solar", "power", "net", "income", "growth", "loans",
    "deposits", "fleet", "barge", "tower", "subscribers", "capacity", "bonds", "mill", "estate",
    "java",
];

fn word() -> impl Strategy<Value = &'static str> {
    prop::sample::select(WORDS)
}

fn phrase(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=max).prop_map(|w| w.join(" "))
}

fn path_strategy() -> impl Strategy<Value = SemanticPath> {
    (prop::collection::vec(phrase(3), 1..4), prop::collection::vec(phrase(3), 0..4)).prop_map(|(m, p)| {
        build_path(normalize_tags(&m), normalize_tags(&p)).expect("master non-empty")
    })
}

fn ranks_strategy() -> impl Strategy<Value = SourceRanks> {
    let r = || prop::option::of(1usize..50);
    (r(), r(), r())
        .prop_filter("at least one source", |(a, b, c)| a.is_some() || b.is_some() || c.is_some())
        .prop_map(|(tag, sem, sparse)| SourceRanks { tag, sem, sparse })
}

fn item(e: &HashedEmbedder, doc: &str, ordinal: u32, text: &str, path: SemanticPath) -> AugmentedChunk {
    AugmentedChunk {
        chunk: Chunk {
            chunk_id: signpost::corpus::chunk_id(doc, ordinal),
            doc_id: doc.into(),
            ordinal,
            text: text.into(),
            char_span: (0, text.len()),
        },
        v_text: embed_text(&[text], e).unwrap().remove(0),
        v_path: embed_path(&path, e, PathEmbedding::MeanTags).unwrap(),
        path,
    }
}

fn exact_index(dim: usize) -> HybridIndex {
    let mut s = IndexSettings::new(dim);
    s.ann = AnnSettings::exact();
    HybridIndex::new(s, "prop")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn segments_tile_the_document(text in "[a-zA-Z ,.\u{e9}\u{4e2d}]{1,1500}", window in 20usize..400, overlap_frac in 0usize..50) {
        prop_assume!(!text.is_empty());
        let overlap = window * overlap_frac / 100;
        let doc = Document::new("d", text.clone());
        let chunks = segment_document(&doc, window, overlap);
        prop_assert!(!chunks.is_empty());
        prop_assert_eq!(chunks[0].char_span.0, 0);
        prop_assert_eq!(chunks.last().unwrap().char_span.1, text.len());
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(&text[c.char_span.0..c.char_span.1], c.text.as_str());
            prop_assert_eq!(c.ordinal as usize, i);
            prop_assert!(c.text.chars().count() <= window);
        }
        for pair in chunks.windows(2) {
            // consecutive windows touch or overlap and always advance
            prop_assert!(pair[1].char_span.0 <= pair[0].char_span.1);
            prop_assert!(pair[1].char_span.0 > pair[0].char_span.0);
        }
        if overlap == 0 {
            let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
            prop_assert_eq!(joined, text);
        }
    }

    #[test]
    fn normalized_tags_satisfy_invariants(raw in prop::collection::vec(".{0,40}", 0..8)) {
        let tags = normalize_tags(&raw);
        let mut seen = BTreeSet::new();
        for t in &tags {
            let s = t.as_str();
            prop_assert!(!s.is_empty());
            prop_assert!(s.split_whitespace().count() <= 4);
            prop_assert!(s.chars().all(|c| c.is_alphanumeric() || c == ' '));
            prop_assert_eq!(s.split_whitespace().collect::<Vec<_>>().join(" "), s);
            prop_assert!(seen.insert(s.to_lowercase()), "duplicate tag {}", s);
            prop_assert_eq!(Tag::parse(s), Some(t.clone()));
        }
        let again: Vec<String> = tags.iter().map(|t| t.as_str().to_string()).collect();
        prop_assert_eq!(normalize_tags(&again), tags);
    }

    #[test]
    fn path_keeps_master_prefix_and_drops_cross_duplicates(m in prop::collection::vec(phrase(2), 1..4), p in prop::collection::vec(phrase(2), 0..4)) {
        let master = normalize_tags(&m);
        let paragraph = normalize_tags(&p);
        let path = build_path(master.clone(), paragraph).unwrap();
        prop_assert_eq!(&path.master, &master);
        for t in &path.paragraph {
            prop_assert!(!master.iter().any(|x| x.same_as(t)));
        }
        let display = path.display();
        prop_assert_eq!(display.split(" → ").count(), path.len());
    }

    #[test]
    fn path_embedding_ignores_tag_order(path in path_strategy(), seed in any::<u64>()) {
        let e = HashedEmbedder::new(48);
        let mut tags: Vec<Tag> = path.tags().cloned().collect();
        let n = tags.len();
        tags.rotate_left((seed as usize) % n);
        let shuffled = SemanticPath { master: tags, paragraph: vec![] };
        let a = embed_path(&path, &e, PathEmbedding::MeanTags).unwrap();
        let b = embed_path(&shuffled, &e, PathEmbedding::MeanTags).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn batched_path_embedding_matches_single(paths in prop::collection::vec(path_strategy(), 1..8), joined in any::<bool>()) {
        let e = HashedEmbedder::new(32);
        let mode = if joined { PathEmbedding::JoinedString } else { PathEmbedding::MeanTags };
        let refs: Vec<&SemanticPath> = paths.iter().collect();
        let batch = embed_paths(&refs, &e, mode).unwrap();
        for (p, v) in paths.iter().zip(&batch) {
            prop_assert_eq!(&embed_path(p, &e, mode).unwrap(), v);
        }
    }

    #[test]
    fn improving_a_rank_never_lowers_the_score(r in ranks_strategy(), which in 0usize..3, missing_worst in any::<bool>()) {
        let params = FusionParams {
            missing: if missing_worst { MissingRank::WorstPlusOne } else { MissingRank::Zero },
            ..FusionParams::default()
        };
        let worst = SourceRanks { tag: Some(60), sem: Some(60), sparse: Some(60) };
        let mut better = r;
        let slot = match which { 0 => &mut better.tag, 1 => &mut better.sem, _ => &mut better.sparse };
        *slot = Some(slot.map_or(1, |x| x.saturating_sub(1).max(1)));
        prop_assert!(rrf_score(&better, &params, &worst) >= rrf_score(&r, &params, &worst));
    }

    #[test]
    fn fusion_order_is_scale_invariant(ranks in prop::collection::vec(ranks_strategy(), 1..15), scale in 0.01f64..100.0) {
        let items: Vec<(String, SourceRanks)> = ranks.into_iter().enumerate().map(|(i, r)| (format!("c{i:02}"), r)).collect();
        let base = FusionParams::default();
        let w = base.weights;
        let scaled = FusionParams {
            weights: FusionWeights { tag: w.tag * scale, sem: w.sem * scale, sparse: w.sparse * scale },
            ..base
        };
        let a = rrf_fuse(&items, items.len(), &base);
        let b = rrf_fuse(&items, items.len(), &scaled);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.score * scale - y.score).abs() <= 1e-12 * scale.max(1.0));
        }
        // order can only differ between candidates whose scores tie up to rounding
        for (x, y) in a.iter().zip(&b) {
            if x.chunk_id != y.chunk_id {
                let sx = a.iter().find(|h| h.chunk_id == y.chunk_id).unwrap().score;
                prop_assert!((x.score - sx).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        retrieved in prop::collection::vec(0u8..20, 0..15),
        gold in prop::collection::btree_set(0u8..20, 1..6),
        k in 1usize..12,
        cand in "[a-c ]{0,30}",
        reference in "[a-c ]{0,30}",
    ) {
        let retrieved: Vec<String> = retrieved.iter().map(|i| format!("c{i}")).collect();
        let gold: BTreeSet<String> = gold.iter().map(|i| format!("c{i}")).collect();
        let h = hit_rate_at_k(&retrieved, &gold, k).unwrap();
        let p = precision_at_k(&retrieved, &gold, k).unwrap();
        prop_assert!(h == 0.0 || h == 1.0);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(p <= h);
        let r = rouge_l(&cand, &reference);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((r - rouge_l(&reference, &cand)).abs() < 1e-12);
    }

    #[test]
    fn rouge_never_rises_under_deletion(tokens in prop::collection::vec(word(), 1..15), drops in prop::collection::vec(any::<prop::sample::Index>(), 0..10)) {
        let reference = tokens.join(" ");
        prop_assert_eq!(rouge_l(&reference, &reference), 1.0);
        let mut cand = tokens.clone();
        let mut last = 1.0;
        for d in drops {
            if cand.len() <= 1 {
                break;
            }
            cand.remove(d.index(cand.len()));
            let score = rouge_l(&cand.join(" "), &reference);
            prop_assert!(score <= last + 1e-12);
            last = score;
        }
    }

    #[test]
    fn merged_subqueries_respect_limits(q in phrase(6), raw in prop::collection::vec(phrase(20), 0..10), max in 0usize..6) {
        let merged = merge_subqueries(&q, &raw, max);
        prop_assert_eq!(&merged[0], &q);
        prop_assert!(merged.len() <= max + 1);
        let keys: BTreeSet<String> = merged.iter().map(|s| s.to_lowercase()).collect();
        prop_assert_eq!(keys.len(), merged.len());
        for s in &merged[1..] {
            prop_assert!(s.split_whitespace().count() <= MAX_SUBQUERY_WORDS);
        }
    }

    #[test]
    fn prompt_is_deterministic_and_shows_every_path(
        items in prop::collection::vec((path_strategy(), phrase(12)), 0..6),
        budget in prop::sample::select(vec![200usize, 800, 100_000]),
    ) {
        let evidence: Vec<Evidence> = items.iter().enumerate().map(|(i, (p, t))| Evidence {
            chunk_id: format!("c{i}"),
            doc_id: "d".into(),
            path: p.display(),
            text: t.clone(),
            pruned: false,
        }).collect();
        let half = evidence.len() / 2;
        let contexts = vec![
            SubQueryContext { sub_query: "first".into(), candidates: vec![], fused: vec![], pruned: evidence[..half].to_vec() },
            SubQueryContext { sub_query: "second".into(), candidates: vec![], fused: vec![], pruned: evidence[half..].to_vec() },
        ];
        let t = PromptTemplates::default().answer;
        let a = assemble_prompt("what happened?", &contexts, &t, budget);
        let b = assemble_prompt("what happened?", &contexts, &t, budget);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.user.contains("Question: what happened?"));
        let used: BTreeSet<&str> = a.contexts_used.iter().flat_map(|c| c.chunk_ids.iter().map(String::as_str)).collect();
        for ev in &evidence {
            if used.contains(ev.chunk_id.as_str()) {
                let header = format!("Path: {}\n", ev.path);
                prop_assert!(a.user.contains(&header), "missing {}", header);
            }
        }
        if budget == 100_000 {
            prop_assert_eq!(used.len(), evidence.len());
            prop_assert!(!a.truncated);
        }
    }

    #[test]
    fn chunk_injection_touches_only_the_target(paths in prop::collection::vec(path_strategy(), 2..8), pick in any::<prop::sample::Index>(), tag in phrase(3)) {
        let e = HashedEmbedder::new(32);
        let mut index = exact_index(32);
        for (i, p) in paths.iter().enumerate() {
            index.upsert(item(&e, &format!("d{}", i % 3), i as u32, &format!("text {i} {tag}"), p.clone())).unwrap();
        }
        let ids: Vec<String> = index.chunk_ids().map(str::to_string).collect();
        let target = &ids[pick.index(ids.len())];
        let before = index.clone_vectors();
        let sparse_before = index.sparse().postings().clone();
        index.inject_tag(&e, target, &tag, TagScope::Chunk, &common::meta()).unwrap();
        for id in &ids {
            let (tag_v, dense_v) = &before[id];
            prop_assert_eq!(index.dense_store().get(id).unwrap(), dense_v.as_slice());
            if id != target {
                prop_assert_eq!(index.tag_store().get(id).unwrap(), tag_v.as_slice());
            }
        }
        prop_assert_eq!(index.sparse().postings(), &sparse_before);
        index.check_consistency().unwrap();
    }

    #[test]
    fn upsert_order_does_not_matter(paths in prop::collection::vec(path_strategy(), 1..10), rotate in any::<prop::sample::Index>(), q in phrase(3)) {
        let e = HashedEmbedder::new(32);
        let items: Vec<AugmentedChunk> = paths
            .iter()
            .enumerate()
            .map(|(i, p)| item(&e, &format!("d{}", i % 4), i as u32, &format!("{} filler {i}", p.display()), p.clone()))
            .collect();
        let mut a = exact_index(32);
        for it in items.iter().cloned() {
            a.upsert(it).unwrap();
        }
        let mut b = exact_index(32);
        let mut order = items.clone();
        let shift = rotate.index(order.len());
        order.rotate_left(shift);
        order.reverse();
        for it in order {
            b.upsert(it).unwrap();
        }
        // a duplicate upsert is a replacement, not an addition
        b.upsert(items[0].clone()).unwrap();
        let v = embed_text(&[q.as_str()], &e).unwrap().remove(0);
        prop_assert_eq!(a.search_tag(&v, 20), b.search_tag(&v, 20));
        prop_assert_eq!(a.search_dense(&v, 20), b.search_dense(&v, 20));
        prop_assert_eq!(a.search_sparse(&q, 20), b.search_sparse(&q, 20));
        prop_assert_eq!(a.sparse().stats(), b.sparse().stats());
        prop_assert_eq!(a.len(), b.len());
    }
}

trait CloneVectors {
    fn clone_vectors(&self) -> std::collections::BTreeMap<String, (Vec<f32>, Vec<f32>)>;
}

impl CloneVectors for HybridIndex {
    fn clone_vectors(&self) -> std::collections::BTreeMap<String, (Vec<f32>, Vec<f32>)> {
        self.chunk_ids()
            .map(|id| {
                (
                    id.to_string(),
                    (
                        self.tag_store().get(id).unwrap().to_vec(),
                        self.dense_store().get(id).unwrap().to_vec(),
                    ),
                )
            })
            .collect()
    }
}
