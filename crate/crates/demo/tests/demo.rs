use signpost::index::TagScope;
use signpost::retrieval::MissingRank;
use signpost_demo::{fuse, probe, segment_text, FuseInput, FuseItem, ProbeChunk, ProbeInput, SegmentInput};

#[test]
fn segments_cover_the_text() {
    let text = "word ".repeat(300);
    let segs = segment_text(&SegmentInput {
        text: text.clone(),
        window: 200,
        overlap: 0,
    })
    .unwrap();
    assert!(segs.len() >= 7);
    let joined: String = segs.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(joined, text);
    for (i, s) in segs.iter().enumerate() {
        assert_eq!(s.chunk_id, format!("doc#{i}"));
        assert_eq!(&text[s.start..s.end], s.text);
    }
    assert!(segment_text(&SegmentInput {
        text,
        window: 10,
        overlap: 10
    })
    .is_err());
}

fn item(id: &str, tag: Option<usize>, sem: Option<usize>, sparse: Option<usize>) -> FuseItem {
    FuseItem {
        chunk_id: id.into(),
        tag,
        sem,
        sparse,
    }
}

#[test]
fn fusion_matches_hand_scores() {
    let input: FuseInput = serde_json::from_value(serde_json::json!({
        "items": [
            {"chunk_id": "a", "tag": 1, "sem": 2},
            {"chunk_id": "b", "sparse": 1},
            {"chunk_id": "c", "tag": 2, "sem": 1, "sparse": 2},
        ],
        "k": 3
    }))
    .unwrap();
    let out = fuse(&input).unwrap();
    let ids: Vec<&str> = out.iter().map(|f| f.chunk_id.as_str()).collect();
    assert_eq!(ids, ["c", "b", "a"]);
    let c = 0.25 / 62.0 + 0.25 / 61.0 + 0.5 / 62.0;
    let a = 0.25 / 61.0 + 0.25 / 62.0;
    let b = 0.5 / 61.0;
    for (got, want) in out.iter().zip([c, b, a]) {
        assert!((got.score - want).abs() < 1e-15);
    }

    let mut worst = input.clone();
    worst.missing = MissingRank::WorstPlusOne;
    worst.k = 1;
    assert_eq!(fuse(&worst).unwrap().len(), 1);

    let bad = FuseInput {
        items: vec![item("a", Some(0), None, None)],
        ..input
    };
    assert!(fuse(&bad).is_err());
}

#[test]
fn injection_moves_the_target_closer() {
    let chunk = |doc: &str, text: &str, master: &[&str], paragraph: &[&str]| ProbeChunk {
        doc_id: doc.into(),
        text: text.into(),
        master: master.iter().map(|s| s.to_string()).collect(),
        paragraph: paragraph.iter().map(|s| s.to_string()).collect(),
    };
    let mut input = ProbeInput {
        chunks: vec![
            chunk("bank", "A bank with many branches.", &["universal bank"], &["branches"]),
            chunk("bank", "Loan growth was strong.", &["universal bank"], &["loans"]),
            chunk("mine", "Copper output rose.", &["copper mining"], &["output"]),
            chunk("port", "Container volumes grew.", &["shipping"], &["containers"]),
        ],
        target: "bank".into(),
        tag: "diversified business model".into(),
        scope: TagScope::Document,
        query: "diversified business model".into(),
        dim: 128,
    };
    let out = probe(&input).unwrap();
    assert!(!out.no_op);
    assert_eq!(out.rows.len(), 2);
    for r in &out.rows {
        assert!(r.after.distance < r.before.distance);
        assert!(r.after.rank <= r.before.rank);
        assert!(r.new_path.contains("diversified business model"));
        assert_ne!(r.old_path, r.new_path);
    }

    input.target = "bank#1".into();
    input.scope = TagScope::Chunk;
    input.tag = "loans".into();
    let out = probe(&input).unwrap();
    assert!(out.no_op);
    assert_eq!(out.rows[0].before, out.rows[0].after);

    input.target = "nowhere".into();
    input.scope = TagScope::Document;
    assert!(probe(&input).is_err());
}
