//! Tokenization shared by the sparse index, the heuristic tagger and the
//! hashed embedder.

/// Lowercased alphanumeric tokens, split on every non-alphanumeric char.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokens grouped into runs that are not interrupted by punctuation.
///
/// Used for n-gram candidates: "BDO Unibank, Inc." yields `[["bdo", "unibank"], ["inc"]]`.
pub(crate) fn phrase_runs(text: &str) -> Vec<Vec<String>> {
    let mut runs = Vec::new();
    let mut current = Vec::new();
    let mut token = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            token.extend(c.to_lowercase());
            continue;
        }
        if !token.is_empty() {
            current.push(std::mem::take(&mut token));
        }
        if !c.is_whitespace() && !current.is_empty() {
            runs.push(std::mem::take(&mut current));
        }
    }
    if !token.is_empty() {
        current.push(token);
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "are", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few",
    "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers",
    "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "may", "me", "might", "more", "most", "must", "my", "myself", "no", "nor",
    "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves",
    "out", "over", "own", "same", "shall", "she", "should", "so", "some", "such", "than", "that",
    "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this",
    "those", "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what",
    "when", "where", "which", "while", "who", "whom", "why", "will", "with", "would", "you",
    "your", "yours", "yourself", "yourselves",
];

/// Built-in English stopword list. Only the heuristic tagger consults it.
pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// A token worth considering as a tag: not a stopword, not purely numeric,
/// and longer than one character.
pub(crate) fn is_informative(token: &str) -> bool {
    token.chars().count() > 1
        && !is_stopword(token)
        && !token.chars().all(|c| c.is_numeric())
}
