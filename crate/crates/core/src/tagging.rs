//! Master and paragraph tag induction, tag normalization, and semantic path
//! construction.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, Document};
use crate::llm::{parse_string_array, AgentRole, CompletionClient, CompletionRequest, LlmError};
use crate::prompts::{render, Template};
use crate::text::{is_informative, phrase_runs, tokenize};

/// Maximum number of words kept in a tag.
pub const MAX_TAG_WORDS: usize = 4;
/// Number of tags requested per paragraph.
pub const PARAGRAPH_TAGS: usize = 3;

/// A normalized tag: 1–4 words, no punctuation, surface case preserved.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tag(String);

impl Tag {
    /// Normalizes a single raw string; `None` when nothing survives.
    pub fn parse(raw: &str) -> Option<Tag> {
        let cleaned: String = raw
            .chars()
            .filter(|&c| c != '\'' && c != '’')
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect();
        let words: Vec<&str> = cleaned.split_whitespace().take(MAX_TAG_WORDS).collect();
        (!words.is_empty()).then(|| Tag(words.join(" ")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn key(&self) -> String {
        self.0.to_lowercase()
    }

    pub fn same_as(&self, other: &Tag) -> bool {
        self.key() == other.key()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Strips punctuation, collapses whitespace, truncates to four words, and
/// drops empties and case-insensitive duplicates (first surface form wins).
pub fn normalize_tags<S: AsRef<str>>(raw: &[S]) -> Vec<Tag> {
    let mut seen = HashSet::new();
    raw.iter()
        .filter_map(|s| Tag::parse(s.as_ref()))
        .filter(|t| seen.insert(t.key()))
        .collect()
}

/// Master tags followed by paragraph tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticPath {
    pub master: Vec<Tag>,
    pub paragraph: Vec<Tag>,
}

impl SemanticPath {
    pub fn tags(&self) -> impl Iterator<Item = &Tag> {
        self.master.iter().chain(&self.paragraph)
    }

    pub fn len(&self) -> usize {
        self.master.len() + self.paragraph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, tag: &Tag) -> bool {
        self.tags().any(|t| t.same_as(tag))
    }

    pub fn display(&self) -> String {
        self.tags()
            .map(Tag::as_str)
            .collect::<Vec<_>>()
            .join(" → ")
    }
}

impl fmt::Display for SemanticPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TaggingError {
    #[error("semantic path needs at least one master tag")]
    EmptyMaster,
    #[error("tagger backend failed for `{target}`: {source}")]
    Backend {
        target: String,
        #[source]
        source: LlmError,
    },
    #[error("tagger output for `{target}` is not a JSON string array: {output:?}")]
    Parse { target: String, output: String },
    #[error("chunk `{0}` has no taggable content; flagged for review")]
    NoTaggableContent(String),
}

/// Concatenates master and paragraph tags, dropping paragraph tags that
/// repeat a master tag.
pub fn build_path(master: Vec<Tag>, paragraph: Vec<Tag>) -> Result<SemanticPath, TaggingError> {
    if master.is_empty() {
        return Err(TaggingError::EmptyMaster);
    }
    let mut seen: HashSet<String> = master.iter().map(Tag::key).collect();
    let paragraph = paragraph.into_iter().filter(|t| seen.insert(t.key())).collect();
    Ok(SemanticPath { master, paragraph })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    Master,
    Paragraph,
}

#[derive(Debug, Error, PartialEq)]
pub enum TaggerError {
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("unparseable tagger output: {0:?}")]
    Parse(String),
}

/// Maps (kind, text, limit) to raw tag strings.
pub trait Tagger: Send + Sync {
    fn raw_tags(&self, kind: TagKind, text: &str, limit: usize) -> Result<Vec<String>, TaggerError>;

    /// Lets corpus-aware taggers update their statistics before a batch.
    fn observe(&self, _documents: &[&str]) {}
}

impl<T: Tagger + ?Sized> Tagger for Arc<T> {
    fn raw_tags(&self, kind: TagKind, text: &str, limit: usize) -> Result<Vec<String>, TaggerError> {
        (**self).raw_tags(kind, text, limit)
    }

    fn observe(&self, documents: &[&str]) {
        (**self).observe(documents)
    }
}

#[derive(Debug, Default)]
struct TermStats {
    documents: u64,
    df: HashMap<String, u64>,
}

/// Offline keyword tagger: ranks unigram and bigram candidates by
/// `tf × idf × words`, ties broken lexicographically.
///
/// Bigrams are two adjacent informative tokens not separated by punctuation
/// and must occur at least twice. A unigram covered by an already selected
/// bigram is skipped.
#[derive(Debug, Default)]
pub struct HeuristicTagger {
    stats: RwLock<TermStats>,
}

impl HeuristicTagger {
    pub fn new() -> Self {
        Self::default()
    }

    fn candidates(text: &str) -> HashMap<String, u64> {
        let mut tf: HashMap<String, u64> = HashMap::new();
        let mut bigrams: HashMap<String, u64> = HashMap::new();
        for run in phrase_runs(text) {
            for (i, tok) in run.iter().enumerate() {
                if !is_informative(tok) {
                    continue;
                }
                *tf.entry(tok.clone()).or_default() += 1;
                if let Some(next) = run.get(i + 1).filter(|n| is_informative(n)) {
                    *bigrams.entry(format!("{tok} {next}")).or_default() += 1;
                }
            }
        }
        tf.extend(bigrams.into_iter().filter(|(_, n)| *n >= 2));
        tf
    }

    fn idf(&self, term: &str) -> f64 {
        let stats = self.stats.read().unwrap();
        let df = stats.df.get(term).copied().unwrap_or(0);
        libm::log(1.0 + (stats.documents as f64 + 1.0) / (df as f64 + 1.0))
    }

    pub fn keywords(&self, text: &str, limit: usize) -> Vec<String> {
        let mut scored: Vec<(f64, String)> = Self::candidates(text)
            .into_iter()
            .map(|(term, tf)| {
                let words = term.split(' ').count() as f64;
                (tf as f64 * self.idf(&term) * words, term)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

        let mut picked: Vec<String> = Vec::new();
        for (_, term) in scored {
            if picked.len() >= limit {
                break;
            }
            let words: Vec<&str> = term.split(' ').collect();
            let covered = |w: &str| {
                picked
                    .iter()
                    .any(|p| p.split(' ').any(|pw| pw == w))
            };
            let redundant = if words.len() == 1 {
                covered(words[0])
            } else {
                words.iter().all(|w| covered(w))
            };
            if !redundant {
                picked.push(term);
            }
        }
        picked
    }
}

impl Tagger for HeuristicTagger {
    fn raw_tags(&self, _kind: TagKind, text: &str, limit: usize) -> Result<Vec<String>, TaggerError> {
        Ok(self.keywords(text, limit))
    }

    fn observe(&self, documents: &[&str]) {
        let mut stats = self.stats.write().unwrap();
        for doc in documents {
            stats.documents += 1;
            for term in Self::candidates(doc).into_keys() {
                *stats.df.entry(term).or_default() += 1;
            }
        }
    }
}

/// Tagger backed by a completion client and the tag prompt templates.
pub struct LlmTagger<C> {
    client: C,
    master: Template,
    paragraph: Template,
    temperature: f32,
}

const ARRAY_REMINDER: &str = "\n\nReturn only the JSON array of strings, nothing else.";

impl<C: CompletionClient> LlmTagger<C> {
    pub fn new(client: C, master: Template, paragraph: Template) -> Self {
        Self {
            client,
            master,
            paragraph,
            temperature: 0.0,
        }
    }
}

impl<C: CompletionClient> Tagger for LlmTagger<C> {
    fn raw_tags(&self, kind: TagKind, text: &str, limit: usize) -> Result<Vec<String>, TaggerError> {
        let (template, role) = match kind {
            TagKind::Master => (&self.master, AgentRole::MasterTagger),
            TagKind::Paragraph => (&self.paragraph, AgentRole::ParagraphTagger),
        };
        let limit_s = limit.to_string();
        let user = render(&template.user, &[("text", text), ("max_tags", &limit_s)]);
        let mut request = CompletionRequest {
            role,
            system: template.system.clone(),
            user,
            temperature: self.temperature,
        };
        let first = self.client.complete(&request)?;
        if let Some(tags) = parse_string_array(&first) {
            return Ok(tags);
        }
        request.user.push_str(ARRAY_REMINDER);
        let second = self.client.complete(&request)?;
        parse_string_array(&second).ok_or(TaggerError::Parse(second))
    }
}

fn lift(target: &str, e: TaggerError) -> TaggingError {
    match e {
        TaggerError::Backend(source) => TaggingError::Backend {
            target: target.to_string(),
            source,
        },
        TaggerError::Parse(output) => TaggingError::Parse {
            target: target.to_string(),
            output,
        },
    }
}

/// Master tags for a document, never empty: falls back to the title, then
/// the doc_id.
pub fn generate_master_tags(
    doc: &Document,
    max_tags: usize,
    tagger: &dyn Tagger,
) -> Result<Vec<Tag>, TaggingError> {
    let raw = tagger
        .raw_tags(TagKind::Master, &doc.text, max_tags)
        .map_err(|e| lift(&doc.doc_id, e))?;
    let mut tags = normalize_tags(&raw);
    tags.truncate(max_tags.max(1));
    if tags.is_empty() {
        tags = [doc.title.as_str(), doc.doc_id.as_str()]
            .into_iter()
            .find_map(Tag::parse)
            .into_iter()
            .collect();
    }
    if tags.is_empty() {
        return Err(TaggingError::EmptyMaster);
    }
    Ok(tags)
}

/// Paragraph tags for a chunk. Requests three; when none survive
/// normalization, falls back to the chunk's most frequent informative token,
/// then to any token.
pub fn generate_paragraph_tags(chunk: &Chunk, tagger: &dyn Tagger) -> Result<Vec<Tag>, TaggingError> {
    let raw = tagger
        .raw_tags(TagKind::Paragraph, &chunk.text, PARAGRAPH_TAGS)
        .map_err(|e| lift(&chunk.chunk_id, e))?;
    let mut tags = normalize_tags(&raw);
    tags.truncate(PARAGRAPH_TAGS);
    if tags.is_empty() {
        tags = fallback_tag(&chunk.text).into_iter().collect();
    }
    if tags.is_empty() {
        return Err(TaggingError::NoTaggableContent(chunk.chunk_id.clone()));
    }
    Ok(tags)
}

fn fallback_tag(text: &str) -> Option<Tag> {
    let tokens = tokenize(text);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let best = |informative: bool| {
        counts
            .iter()
            .filter(|(t, _)| !informative || is_informative(t))
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(t, _)| *t)
    };
    best(true).or_else(|| best(false)).and_then(Tag::parse)
}

/// Per-document master tag cache keyed by doc_id and a text fingerprint, so
/// every chunk of one document version shares identical master tags.
#[derive(Debug, Default)]
pub struct MasterTagCache {
    entries: RwLock<HashMap<String, (u64, Vec<Tag>)>>,
}

impl MasterTagCache {
    pub fn get_or_generate(
        &self,
        doc: &Document,
        max_tags: usize,
        tagger: &dyn Tagger,
    ) -> Result<Vec<Tag>, TaggingError> {
        let fp = xxhash_rust::xxh3::xxh3_64(doc.text.as_bytes());
        if let Some((cached_fp, tags)) = self.entries.read().unwrap().get(&doc.doc_id) {
            if *cached_fp == fp {
                return Ok(tags.clone());
            }
        }
        let tags = generate_master_tags(doc, max_tags, tagger)?;
        let mut entries = self.entries.write().unwrap();
        // A concurrent writer may have won; keep its result.
        let entry = entries
            .entry(doc.doc_id.clone())
            .or_insert_with(|| (fp, tags.clone()));
        if entry.0 != fp {
            *entry = (fp, tags);
        }
        Ok(entry.1.clone())
    }

    pub fn invalidate(&self, doc_id: &str) {
        self.entries.write().unwrap().remove(doc_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedClient;
    use crate::prompts::PromptTemplates;

    fn tags(xs: &[&str]) -> Vec<Tag> {
        xs.iter().map(|s| Tag::parse(s).unwrap()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(
            normalize_tags(&["Universal Banking!!", "universal banking"]),
            tags(&["Universal Banking"])
        );
        assert!(normalize_tags::<&str>(&[]).is_empty());
        assert_eq!(normalize_tags(&["a b c d e f"]), tags(&["a b c d"]));
        assert_eq!(normalize_tags(&["  \"Q3\"   budget ", "...", ""]), tags(&["Q3 budget"]));
        assert_eq!(normalize_tags(&["BDO's cash-flow"]), tags(&["BDOs cash flow"]));
    }

    #[test]
    fn path_concatenation_and_dedup() {
        let p = build_path(
            tags(&["BDO Unibank", "company profile"]),
            tags(&["universal banking services", "financial firm"]),
        )
        .unwrap();
        assert_eq!(
            p.display(),
            "BDO Unibank → company profile → universal banking services → financial firm"
        );

        let p = build_path(tags(&["BDO Unibank"]), tags(&["bdo unibank", "banking"])).unwrap();
        assert_eq!(p.paragraph, tags(&["banking"]));

        let p = build_path(tags(&["solo"]), vec![]).unwrap();
        assert_eq!(p.len(), 1);

        assert_eq!(build_path(vec![], tags(&["x"])), Err(TaggingError::EmptyMaster));
    }

    #[test]
    fn heuristic_single_word() {
        let doc = Document::new("t", "tesla");
        assert_eq!(
            generate_master_tags(&doc, 5, &HeuristicTagger::new()).unwrap(),
            tags(&["tesla"])
        );
    }

    #[test]
    fn heuristic_prefers_repeated_bigram() {
        let t = HeuristicTagger::new();
        let kws = t.keywords(
            "BDO Unibank is the largest bank. BDO Unibank offers leasing. Leasing grows.",
            3,
        );
        assert_eq!(kws[0], "bdo unibank");
        assert_eq!(kws[1], "leasing");
        assert!(!kws.contains(&"bdo".to_string()));
    }

    #[test]
    fn heuristic_ties_are_lexicographic() {
        let t = HeuristicTagger::new();
        assert_eq!(t.keywords("zeta alpha mid", 3), vec!["alpha", "mid", "zeta"]);
    }

    #[test]
    fn master_truncates_to_limit() {
        struct Ten;
        impl Tagger for Ten {
            fn raw_tags(&self, _: TagKind, _: &str, _: usize) -> Result<Vec<String>, TaggerError> {
                Ok((0..10).map(|i| format!("tag{i}")).collect())
            }
        }
        let got = generate_master_tags(&Document::new("d", "x"), 5, &Ten).unwrap();
        assert_eq!(got, tags(&["tag0", "tag1", "tag2", "tag3", "tag4"]));
    }

    #[test]
    fn master_falls_back_to_title_then_id() {
        struct Empty;
        impl Tagger for Empty {
            fn raw_tags(&self, _: TagKind, _: &str, _: usize) -> Result<Vec<String>, TaggerError> {
                Ok(vec![])
            }
        }
        let mut doc = Document::new("doc-7", "text");
        assert_eq!(generate_master_tags(&doc, 3, &Empty).unwrap(), tags(&["doc 7"]));
        doc.title = "Annual Report".into();
        assert_eq!(generate_master_tags(&doc, 3, &Empty).unwrap(), tags(&["Annual Report"]));
    }

    fn chunk(text: &str) -> Chunk {
        Chunk {
            chunk_id: "d#0".into(),
            doc_id: "d".into(),
            ordinal: 0,
            text: text.into(),
            char_span: (0, text.len()),
        }
    }

    #[test]
    fn paragraph_heuristic_first_is_top_term() {
        let c = chunk("The Q3 budget was approved. Budget cuts hit marketing; budget review next.");
        let got = generate_paragraph_tags(&c, &HeuristicTagger::new()).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].as_str(), "budget");
    }

    #[test]
    fn paragraph_punctuation_only_is_flagged() {
        let c = chunk("?!... ---");
        assert_eq!(
            generate_paragraph_tags(&c, &HeuristicTagger::new()),
            Err(TaggingError::NoTaggableContent("d#0".into()))
        );
        // stopword-only text still gets a raw-token fallback
        let got = generate_paragraph_tags(&chunk("the the a"), &HeuristicTagger::new()).unwrap();
        assert_eq!(got, tags(&["the"]));
    }

    #[test]
    fn llm_tagger_retries_once_then_errors() {
        let t = PromptTemplates::default();
        let client = Arc::new(
            ScriptedClient::default().rule(AgentRole::ParagraphTagger, None, "Here are tags: none"),
        );
        let tagger = LlmTagger::new(client.clone(), t.master_tags, t.paragraph_tags);
        let err = generate_paragraph_tags(&chunk("revenue grew"), &tagger).unwrap_err();
        assert!(matches!(err, TaggingError::Parse { ref target, .. } if target == "d#0"));
        let reqs = client.requests();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1].user.ends_with(ARRAY_REMINDER));
        assert!(reqs[0].user.contains("Paragraph:\nrevenue grew"));
    }

    #[test]
    fn llm_tagger_parses_array() {
        let t = PromptTemplates::default();
        let client = ScriptedClient::default().rule(
            AgentRole::MasterTagger,
            None,
            r#"["BDO Unibank", "Philippines", "universal banking!"]"#,
        );
        let tagger = LlmTagger::new(client, t.master_tags, t.paragraph_tags);
        let got = generate_master_tags(&Document::new("bdo", "..."), 5, &tagger).unwrap();
        assert_eq!(got, tags(&["BDO Unibank", "Philippines", "universal banking"]));
    }

    #[test]
    fn cache_returns_identical_tags_and_tracks_text() {
        let cache = MasterTagCache::default();
        let tagger = HeuristicTagger::new();
        let mut doc = Document::new("d", "alpha beta alpha");
        let a = cache.get_or_generate(&doc, 2, &tagger).unwrap();
        let b = cache.get_or_generate(&doc, 2, &tagger).unwrap();
        assert_eq!(a, b);
        doc.text = "gamma".into();
        assert_eq!(cache.get_or_generate(&doc, 2, &tagger).unwrap(), tags(&["gamma"]));
    }
}
