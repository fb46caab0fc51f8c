//! Corpus loading and sliding-window segmentation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus path not found: {0}")]
    Missing(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record {record} in {path}: {reason}")]
    Malformed {
        path: PathBuf,
        record: usize,
        reason: String,
    },
    #[error("duplicate doc_id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: String::new(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }
}

/// A contiguous window of a parent document.
///
/// `char_span` holds byte offsets into the parent text, always on char
/// boundaries, so `&parent.text[start..end] == text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: u32,
    pub text: String,
    pub char_span: (usize, usize),
}

pub fn chunk_id(doc_id: &str, ordinal: u32) -> String {
    format!("{doc_id}#{ordinal}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSchema {
    /// One text file per document with an optional `key: value` header block.
    Profiles,
    /// Line-delimited JSON records `{doc_id, title?, text, metadata?}`.
    JsonLines,
}

impl std::str::FromStr for CorpusSchema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "profiles" => Ok(Self::Profiles),
            "jsonl" | "json_lines" => Ok(Self::JsonLines),
            other => Err(format!("unknown corpus schema `{other}`")),
        }
    }
}

pub fn load_corpus(path: &Path, schema: CorpusSchema) -> Result<Vec<Document>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::Missing(path.to_path_buf()));
    }
    let docs = match schema {
        CorpusSchema::Profiles => load_profiles(path)?,
        CorpusSchema::JsonLines => load_json_lines(path)?,
    };
    let mut seen = HashSet::new();
    for doc in &docs {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(CorpusError::DuplicateId(doc.doc_id.clone()));
        }
    }
    Ok(docs)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_profiles(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(path).map_err(io_err(path))? {
            let entry = entry.map_err(io_err(path))?;
            let p = entry.path();
            let hidden = p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'));
            if p.is_file() && !hidden {
                files.push(p);
            }
        }
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };

    files
        .iter()
        .enumerate()
        .map(|(i, file)| {
            let raw = fs::read_to_string(file).map_err(io_err(file))?;
            let stem = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            parse_profile(&stem, &raw).map_err(|reason| CorpusError::Malformed {
                path: file.clone(),
                record: i,
                reason,
            })
        })
        .collect()
}

fn header_line(line: &str) -> Option<(&str, &str)> {
    let (key, value) = line.split_once(':')?;
    let key = key.trim();
    let valid = !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    valid.then(|| (key, value.trim()))
}

/// Parses a profile body. The leading block counts as a header only when
/// every line before the first blank line is a `key: value` pair.
pub fn parse_profile(stem: &str, raw: &str) -> Result<Document, String> {
    let raw = raw.strip_prefix('\u{feff}').unwrap_or(raw);
    let mut metadata = BTreeMap::new();
    let mut body = raw;

    if let Some(split) = raw.find("\n\n").or_else(|| raw.find("\r\n\r\n")) {
        let head = &raw[..split];
        let pairs: Option<Vec<_>> = head.lines().map(header_line).collect();
        if let Some(pairs) = pairs.filter(|p| !p.is_empty()) {
            for (k, v) in pairs {
                metadata.insert(k.to_lowercase(), v.to_string());
            }
            body = raw[split..].trim_start_matches(['\r', '\n']);
        }
    }

    let doc_id = metadata
        .remove("doc_id")
        .unwrap_or_else(|| stem.to_string());
    if doc_id.is_empty() {
        return Err("empty doc_id".into());
    }
    let text = body.trim_end().to_string();
    if text.trim().is_empty() {
        return Err(format!("document `{doc_id}` has an empty body"));
    }
    let title = metadata.remove("title").unwrap_or_default();
    Ok(Document {
        doc_id,
        title,
        text,
        metadata,
    })
}

fn load_json_lines(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    let mut docs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            record: i + 1,
            reason,
        };
        let doc: Document = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if doc.text.trim().is_empty() {
            return Err(malformed(format!("document `{}` has empty text", doc.doc_id)));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// One question of a QA benchmark file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
    pub doc_id: String,
}

/// Reads a line-delimited `{question, answer, doc_id}` file.
pub fn load_qa(path: &Path) -> Result<Vec<QaRecord>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::Missing(path.to_path_buf()));
    }
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                path: path.to_path_buf(),
                record: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Splits a document into overlapping windows of `window_chars` characters.
///
/// Each window starts `overlap_chars` before the previous one ended. When a
/// whitespace char falls within the last tenth of a window, the boundary
/// moves left to just after the nearest one; otherwise the split is hard.
/// Panics unless `overlap_chars < window_chars`.
pub fn segment_document(doc: &Document, window_chars: usize, overlap_chars: usize) -> Vec<Chunk> {
    assert!(window_chars >= 1, "window_chars must be positive");
    assert!(
        overlap_chars < window_chars,
        "overlap_chars must be smaller than window_chars"
    );
    // Byte offset of every char, plus the end sentinel.
    let offsets: Vec<usize> = doc
        .text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(doc.text.len()))
        .collect();
    let chars: Vec<char> = doc.text.chars().collect();
    let len = chars.len();
    let tail = window_chars / 10;

    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start < len {
        let hard_end = start + window_chars;
        let end = if hard_end >= len {
            len
        } else {
            (hard_end - tail + 1..=hard_end)
                .rev()
                .find(|&e| chars[e - 1].is_whitespace())
                .unwrap_or(hard_end)
        };
        let ordinal = chunks.len() as u32;
        let span = (offsets[start], offsets[end]);
        chunks.push(Chunk {
            chunk_id: chunk_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            text: doc.text[span.0..span.1].to_string(),
            char_span: span,
        });
        if end == len {
            break;
        }
        start = end.saturating_sub(overlap_chars).max(start + 1);
    }
    chunks
}
