//! Answer prompt assembly and the final completion call.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{AgentRole, CompletionClient, CompletionRequest, LlmError, RetryPolicy};
use crate::prompts::{render, Template};
use crate::retrieval::{Evidence, SubQueryContext};

pub const DEFAULT_PROMPT_BUDGET: usize = 24_000;
pub const NO_EVIDENCE: &str = "(no evidence found)";
pub const TRUNCATED: &str = "[evidence truncated]";
const ABSTAIN: &str = "No evidence was retrieved for any sub-query. Reply that the context does not contain the answer.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextUse {
    pub sub_query: String,
    pub chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub system: String,
    pub user: String,
    /// Hex SHA-256 of system and user text.
    pub fingerprint: String,
    /// Evidence that made it into the prompt, per sub-query.
    pub contexts_used: Vec<ContextUse>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub contexts_used: Vec<ContextUse>,
    pub prompt_fingerprint: String,
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("generation failed (prompt {fingerprint}): {source}")]
    Backend {
        fingerprint: String,
        #[source]
        source: LlmError,
    },
}

impl GenerationError {
    pub fn fingerprint(&self) -> &str {
        match self {
            GenerationError::Backend { fingerprint, .. } => fingerprint,
        }
    }
}

pub fn fingerprint(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn take_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Evidence kept for one item: full, a prefix, or dropped.
#[derive(Clone, Copy, PartialEq)]
enum Keep {
    All,
    Prefix(usize),
    Nothing,
}

fn layout(q: &str, contexts: &[SubQueryContext], keep: &[Vec<Keep>]) -> String {
    let mut out = format!("Question: {q}\n\nContext:\n");
    let all_empty = contexts.iter().all(|c| c.pruned.is_empty());
    for (i, (ctx, keeps)) in contexts.iter().zip(keep).enumerate() {
        out.push_str(&format!("\n[Sub-query {}] {}\n", i + 1, ctx.sub_query));
        if ctx.pruned.is_empty() {
            out.push_str(NO_EVIDENCE);
            out.push('\n');
            continue;
        }
        let mut dropped = false;
        for (ev, k) in ctx.pruned.iter().zip(keeps) {
            match k {
                Keep::All => push_item(&mut out, ev, &ev.text, false),
                Keep::Prefix(n) => push_item(&mut out, ev, take_chars(&ev.text, *n), true),
                Keep::Nothing => dropped = true,
            }
        }
        if dropped {
            out.push_str(TRUNCATED);
            out.push('\n');
        }
    }
    if all_empty {
        out.push('\n');
        out.push_str(ABSTAIN);
        out.push('\n');
    }
    out
}

fn push_item(out: &mut String, ev: &Evidence, text: &str, cut: bool) {
    out.push_str("Path: ");
    out.push_str(&ev.path);
    out.push('\n');
    out.push_str(text);
    if cut {
        out.push(' ');
        out.push_str(TRUNCATED);
    }
    out.push('\n');
}

/// Builds the answer prompt: question first, then one block per sub-query in
/// the given order, each evidence item under a `Path:` header line.
///
/// When the user message would exceed `budget_chars`, evidence is cut from
/// the end: the last item of the last block shrinks first, whole items are
/// dropped once they no longer fit. The question and sub-query lines are
/// never cut.
pub fn assemble_prompt(
    q: &str,
    contexts: &[SubQueryContext],
    template: &Template,
    budget_chars: usize,
) -> AssembledPrompt {
    let mut keep: Vec<Vec<Keep>> = contexts
        .iter()
        .map(|c| vec![Keep::All; c.pruned.len()])
        .collect();
    let build = |keep: &[Vec<Keep>]| render(&template.user, &[("context", &layout(q, contexts, keep)), ("q", q)]);
    let mut user = build(&keep);
    let mut truncated = false;

    let slots: Vec<(usize, usize)> = contexts
        .iter()
        .enumerate()
        .flat_map(|(b, c)| (0..c.pruned.len()).map(move |i| (b, i)))
        .collect();
    for &(b, i) in slots.iter().rev() {
        let len = char_len(&user);
        if len <= budget_chars {
            break;
        }
        truncated = true;
        let text_len = char_len(&contexts[b].pruned[i].text);
        let excess = len - budget_chars;
        // shrinking adds the marker, so aim a little lower
        let cut_cost = TRUNCATED.len() + 1;
        if excess + cut_cost < text_len {
            keep[b][i] = Keep::Prefix(text_len - excess - cut_cost);
            user = build(&keep);
            if char_len(&user) <= budget_chars {
                break;
            }
        }
        keep[b][i] = Keep::Nothing;
        user = build(&keep);
    }

    let contexts_used = contexts
        .iter()
        .zip(&keep)
        .map(|(c, k)| ContextUse {
            sub_query: c.sub_query.clone(),
            chunk_ids: c
                .pruned
                .iter()
                .zip(k)
                .filter(|(_, k)| **k != Keep::Nothing)
                .map(|(e, _)| e.chunk_id.clone())
                .collect(),
        })
        .collect();
    AssembledPrompt {
        fingerprint: fingerprint(&template.system, &user),
        system: template.system.clone(),
        user,
        contexts_used,
        truncated,
    }
}

pub fn generate_answer(
    prompt: &AssembledPrompt,
    client: &dyn CompletionClient,
    retry: &RetryPolicy,
    temperature: f32,
) -> Result<Answer, GenerationError> {
    let request = CompletionRequest {
        role: AgentRole::Generator,
        system: prompt.system.clone(),
        user: prompt.user.clone(),
        temperature,
    };
    let text = retry
        .run(|_| client.complete(&request))
        .map_err(|source| GenerationError::Backend {
            fingerprint: prompt.fingerprint.clone(),
            source,
        })?;
    Ok(Answer {
        text: text.trim().to_string(),
        contexts_used: prompt.contexts_used.clone(),
        prompt_fingerprint: prompt.fingerprint.clone(),
    })
}
