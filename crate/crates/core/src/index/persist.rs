//! Directory layout: `header`, `chunks`, `vectors.tag`, `vectors.dense`,
//! `postings`, `editlog`. Integers are little-endian, text is UTF-8 with a
//! u32 length prefix. The header lists a SHA-256 for every other file and
//! ends with a SHA-256 of itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AnnSettings, Bm25Params, EditRecord, HybridIndex, IndexError, IndexSettings, Stored};
use crate::corpus::Chunk;
use crate::embedding::{Metric, PathEmbedding};
use crate::tagging::{SemanticPath, Tag};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SIGNPOST";
const FILES: [&str; 5] = ["chunks", "vectors.tag", "vectors.dense", "postings", "editlog"];

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tags(&mut self, tags: &[Tag]) {
        self.len(tags.len());
        for t in tags {
            self.str(t.as_str());
        }
    }
}

struct Reader<'a> {
    file: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(file: &'static str, buf: &'a [u8]) -> Self {
        Self { file, buf, pos: 0 }
    }

    fn corrupt(&self, reason: impl Into<String>) -> IndexError {
        IndexError::Corrupt {
            file: self.file.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| self.corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, IndexError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, IndexError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupt("length overflow"))
    }
    fn str(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }
    fn tags(&mut self) -> Result<Vec<Tag>, IndexError> {
        let n = self.u32()?;
        (0..n)
            .map(|_| {
                let s = self.str()?;
                Tag::parse(&s)
                    .filter(|t| t.as_str() == s)
                    .ok_or_else(|| self.corrupt(format!("invalid tag {s:?}")))
            })
            .collect()
    }
    fn finish(&self) -> Result<(), IndexError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(self.corrupt("trailing bytes"))
        }
    }
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn path_mode_code(mode: PathEmbedding) -> u8 {
    match mode {
        PathEmbedding::MeanTags => 0,
        PathEmbedding::JoinedString => 1,
    }
}

pub(super) fn write(index: &HybridIndex, dir: &Path) -> Result<(), IndexError> {
    fs::create_dir_all(dir)?;
    let order: Vec<&String> = index.chunks.keys().collect();
    let refs: BTreeMap<&str, u32> = order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();

    let mut chunks = Writer::default();
    chunks.u64(order.len() as u64);
    for id in &order {
        let s = &index.chunks[*id];
        chunks.str(&s.chunk.chunk_id);
        chunks.str(&s.chunk.doc_id);
        chunks.u32(s.chunk.ordinal);
        chunks.u64(s.chunk.char_span.0 as u64);
        chunks.u64(s.chunk.char_span.1 as u64);
        chunks.str(&s.chunk.text);
        chunks.tags(&s.path.master);
        chunks.tags(&s.path.paragraph);
    }
    chunks.u64(index.docs.len() as u64);
    for (doc_id, entry) in &index.docs {
        chunks.str(doc_id);
        chunks.str(&entry.title);
        chunks.len(entry.metadata.len());
        for (k, v) in &entry.metadata {
            chunks.str(k);
            chunks.str(v);
        }
    }

    let vectors = |store: &super::VectorStore| {
        let mut w = Writer::default();
        w.u32(index.settings.dim as u32);
        w.u64(order.len() as u64);
        for id in &order {
            for x in store.get(id).expect("stores share the chunk set") {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        w
    };
    let tag = vectors(&index.tag);
    let dense = vectors(&index.dense);

    let mut postings = Writer::default();
    let terms = index.sparse.postings();
    postings.u64(terms.len() as u64);
    for (term, list) in terms {
        postings.str(term);
        postings.len(list.len());
        let mut entries: Vec<(u32, u32)> = list.iter().map(|(id, tf)| (refs[id.as_str()], *tf)).collect();
        entries.sort_unstable();
        for (r, tf) in entries {
            postings.u32(r);
            postings.u32(tf);
        }
    }

    let mut editlog = Writer::default();
    for rec in &index.editlog {
        let json = serde_json::to_vec(rec).expect("edit records serialize");
        editlog.len(json.len());
        editlog.0.extend_from_slice(&json);
    }

    let bodies = [chunks.0, tag.0, dense.0, postings.0, editlog.0];

    let mut header = Writer::default();
    header.0.extend_from_slice(MAGIC);
    header.u32(FORMAT_VERSION);
    header.u32(index.settings.dim as u32);
    header.u8(index.settings.tag_metric.code());
    header.u8(index.settings.dense_metric.code());
    header.u8(path_mode_code(index.settings.path_embedding));
    header.f64(index.settings.bm25.k1);
    header.f64(index.settings.bm25.b);
    header.str(&index.fingerprint);
    header.u64(order.len() as u64);
    header.len(FILES.len());
    for (name, body) in FILES.iter().zip(&bodies) {
        header.str(name);
        header.u64(body.len() as u64);
        header.0.extend_from_slice(&sha(body));
    }
    let digest = sha(&header.0);
    header.0.extend_from_slice(&digest);

    // header last, so a crash mid-write leaves no loadable half-index
    let _ = fs::remove_file(dir.join("header"));
    for (name, body) in FILES.iter().zip(&bodies) {
        fs::write(dir.join(name), body)?;
    }
    let tmp = dir.join("header.tmp");
    fs::write(&tmp, &header.0)?;
    fs::rename(tmp, dir.join("header"))?;
    Ok(())
}

pub(super) fn read(
    dir: &Path,
    expected_fingerprint: Option<&str>,
    ann: Option<AnnSettings>,
) -> Result<HybridIndex, IndexError> {
    let raw = fs::read(dir.join("header"))?;
    if raw.len() < 32 {
        return Err(IndexError::Corrupt {
            file: "header".into(),
            reason: "truncated".into(),
        });
    }
    let (body, digest) = raw.split_at(raw.len() - 32);
    let mut h = Reader::new("header", body);
    if h.take(8)? != MAGIC {
        return Err(h.corrupt("bad magic"));
    }
    let version = h.u32()?;
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if sha(body) != digest {
        return Err(h.corrupt("checksum mismatch"));
    }
    let dim = h.u32()? as usize;
    let tag_metric = Metric::from_code(h.u8()?).ok_or_else(|| h.corrupt("unknown metric"))?;
    let dense_metric = Metric::from_code(h.u8()?).ok_or_else(|| h.corrupt("unknown metric"))?;
    let path_embedding = match h.u8()? {
        0 => PathEmbedding::MeanTags,
        1 => PathEmbedding::JoinedString,
        _ => return Err(h.corrupt("unknown path embedding mode")),
    };
    let bm25 = Bm25Params {
        k1: h.f64()?,
        b: h.f64()?,
    };
    let fingerprint = h.str()?;
    if let Some(expected) = expected_fingerprint {
        if expected != fingerprint {
            return Err(IndexError::FingerprintMismatch {
                stored: fingerprint,
                current: expected.to_string(),
            });
        }
    }
    let count = h.usize()?;
    let nfiles = h.u32()? as usize;
    let mut bodies: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for _ in 0..nfiles {
        let name = h.str()?;
        let len = h.usize()?;
        let want: [u8; 32] = h.take(32)?.try_into().unwrap();
        let Some(&file) = FILES.iter().find(|f| **f == name) else {
            return Err(h.corrupt(format!("unknown file entry `{name}`")));
        };
        let data = fs::read(dir.join(file))?;
        if data.len() != len {
            return Err(IndexError::Corrupt {
                file: file.into(),
                reason: format!("expected {len} bytes, found {}", data.len()),
            });
        }
        if sha(&data) != want {
            return Err(IndexError::Corrupt {
                file: file.into(),
                reason: "checksum mismatch".into(),
            });
        }
        bodies.insert(name, data);
    }
    h.finish()?;
    if let Some(missing) = FILES.iter().find(|f| !bodies.contains_key(**f)) {
        return Err(h.corrupt(format!("no entry for `{missing}`")));
    }

    let settings = IndexSettings {
        dim,
        tag_metric,
        dense_metric,
        path_embedding,
        bm25,
        ann: ann.unwrap_or_default(),
    };
    let mut index = HybridIndex::new(settings, fingerprint);

    let mut r = Reader::new("chunks", &bodies["chunks"]);
    if r.usize()? != count {
        return Err(r.corrupt("chunk count disagrees with header"));
    }
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let chunk_id = r.str()?;
        let doc_id = r.str()?;
        let ordinal = r.u32()?;
        let start = r.usize()?;
        let end = r.usize()?;
        let text = r.str()?;
        let master = r.tags()?;
        let paragraph = r.tags()?;
        if master.is_empty() {
            return Err(r.corrupt(format!("`{chunk_id}` has no master tags")));
        }
        index
            .docs
            .entry(doc_id.clone())
            .or_default()
            .chunk_ids
            .insert(chunk_id.clone());
        order.push(chunk_id.clone());
        index.chunks.insert(
            chunk_id.clone(),
            Stored {
                chunk: Chunk {
                    chunk_id,
                    doc_id,
                    ordinal,
                    text,
                    char_span: (start, end),
                },
                path: SemanticPath { master, paragraph },
            },
        );
    }
    if index.chunks.len() != count {
        return Err(r.corrupt("duplicate chunk id"));
    }
    let ndocs = r.usize()?;
    for _ in 0..ndocs {
        let doc_id = r.str()?;
        let title = r.str()?;
        let nmeta = r.u32()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..nmeta {
            let k = r.str()?;
            metadata.insert(k, r.str()?);
        }
        let entry = index.docs.get_mut(&doc_id).ok_or_else(|| r.corrupt(format!("document `{doc_id}` has no chunks")))?;
        entry.title = title;
        entry.metadata = metadata;
    }
    r.finish()?;

    for (file, store) in [("vectors.tag", &mut index.tag), ("vectors.dense", &mut index.dense)] {
        let mut r = Reader::new(file, &bodies[file]);
        if r.u32()? as usize != dim || r.usize()? != count {
            return Err(r.corrupt("shape disagrees with header"));
        }
        let mut v = vec![0f32; dim];
        for id in &order {
            for x in v.iter_mut() {
                *x = r.f32()?;
            }
            store.upsert(id, &v);
        }
        r.finish()?;
    }

    let mut r = Reader::new("postings", &bodies["postings"]);
    let nterms = r.usize()?;
    let mut per_chunk: Vec<Vec<(String, u32)>> = vec![Vec::new(); count];
    for _ in 0..nterms {
        let term = r.str()?;
        let n = r.u32()?;
        for _ in 0..n {
            let chunk_ref = r.u32()? as usize;
            let tf = r.u32()?;
            let slot = per_chunk
                .get_mut(chunk_ref)
                .ok_or_else(|| IndexError::Corrupt {
                    file: "postings".into(),
                    reason: format!("chunk reference {chunk_ref} out of range"),
                })?;
            slot.push((term.clone(), tf));
        }
    }
    r.finish()?;
    for (id, counts) in order.iter().zip(&per_chunk) {
        index.sparse.insert_counts(id, counts);
    }

    let mut r = Reader::new("editlog", &bodies["editlog"]);
    while r.pos < r.buf.len() {
        let n = r.u32()? as usize;
        let bytes = r.take(n)?;
        let rec: EditRecord = serde_json::from_slice(bytes).map_err(|e| r.corrupt(e.to_string()))?;
        index.editlog.push(rec);
    }

    index.check_consistency().map_err(|reason| IndexError::Corrupt {
        file: "chunks".into(),
        reason,
    })?;
    Ok(index)
}
