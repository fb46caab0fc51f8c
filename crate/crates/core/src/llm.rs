//! Completion clients shared by the tagging, retrieval and generation seats.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    MasterTagger,
    ParagraphTagger,
    Rewriter,
    Pruner,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: AgentRole,
    pub system: String,
    pub user: String,
    pub temperature: f32,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    /// No backend configured. Never retried.
    #[error("no completion backend configured")]
    Unavailable,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("scripted backend has no response for {0:?}")]
    Unscripted(AgentRole),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) | LlmError::Malformed(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            LlmError::Unavailable | LlmError::Unscripted(_) => false,
        }
    }
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

impl<T: CompletionClient + ?Sized> CompletionClient for Arc<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

/// Fails every call immediately, which drives every seat onto its
/// degradation path.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullClient;

impl CompletionClient for NullClient {
    fn complete(&self, _: &CompletionRequest) -> Result<String, LlmError> {
        Err(LlmError::Unavailable)
    }
}

/// One fixture rule: the first rule whose role matches and whose `contains`
/// (if any) is a substring of the user message wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub role: AgentRole,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub response: String,
    /// Respond with a transport failure instead of `response`.
    #[serde(default)]
    pub fail: bool,
}

/// Deterministic fixture-driven backend. Records every request it sees.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    rules: Vec<ScriptRule>,
    log: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedClient {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Fixture {
            rules: Vec<ScriptRule>,
        }
        let f: Fixture = serde_json::from_str(json)?;
        Ok(Self::new(f.rules))
    }

    pub fn rule(mut self, role: AgentRole, contains: Option<&str>, response: &str) -> Self {
        self.rules.push(ScriptRule {
            role,
            contains: contains.map(str::to_string),
            response: response.to_string(),
            fail: false,
        });
        self
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl CompletionClient for ScriptedClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.log.lock().unwrap().push(request.clone());
        let rule = self.rules.iter().find(|r| {
            r.role == request.role
                && r.contains
                    .as_deref()
                    .is_none_or(|needle| request.user.contains(needle))
        });
        match rule {
            Some(r) if r.fail => Err(LlmError::Transport("scripted failure".into())),
            Some(r) => Ok(r.response.clone()),
            None => Err(LlmError::Unscripted(request.role)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 2,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, returns a non-retryable error, or the
    /// attempts are spent. Delay doubles after each failure.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt + 1 >= self.attempts.max(1) || !e.is_retryable() => return Err(e),
                Err(e) => {
                    log::debug!("attempt {attempt} failed: {e}; retrying");
                    let delay = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
            }
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct InFlightLimit {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Extracts a JSON string array from model output, tolerating code fences and
/// surrounding chatter. Non-string elements are rejected.
pub fn parse_string_array(output: &str) -> Option<Vec<String>> {
    let start = output.find('[')?;
    let end = output.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&output[start..=end]).ok()
}

#[cfg(feature = "remote")]
pub use remote::RemoteChatClient;

#[cfg(feature = "remote")]
mod remote {
    use super::*;
    use serde_json::json;

    /// Chat-completions over JSON/HTTP:
    /// `{model, messages:[{role, content}], temperature}` →
    /// `{choices:[{message:{content}}]}`.
    pub struct RemoteChatClient {
        endpoint: String,
        model: String,
        api_key: Option<String>,
        agent: ureq::Agent,
        limit: Arc<InFlightLimit>,
    }

    impl RemoteChatClient {
        pub fn new(
            endpoint: impl Into<String>,
            model: impl Into<String>,
            api_key: Option<String>,
            limit: Arc<InFlightLimit>,
        ) -> Self {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(120)))
                .http_status_as_error(false)
                .build()
                .into();
            Self {
                endpoint: endpoint.into(),
                model: model.into(),
                api_key,
                agent,
                limit,
            }
        }
    }

    impl CompletionClient for RemoteChatClient {
        fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
            let body = json!({
                "model": self.model,
                "messages": [
                    {"role": "system", "content": request.system},
                    {"role": "user", "content": request.user},
                ],
                "temperature": request.temperature,
            });
            let _permit = self.limit.acquire();
            let mut req = self.agent.post(&self.endpoint);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(&body)
                .map_err(|e| LlmError::Transport(e.to_string()))?;
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| LlmError::Transport(e.to_string()))?;
            if status >= 400 {
                return Err(LlmError::Status { status, body: text });
            }
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn req(role: AgentRole, user: &str) -> CompletionRequest {
        CompletionRequest {
            role,
            system: String::new(),
            user: user.into(),
            temperature: 0.0,
        }
    }

    #[test]
    fn scripted_matches_role_and_substring() {
        let c = ScriptedClient::default()
            .rule(AgentRole::Pruner, Some("alpha"), "A")
            .rule(AgentRole::Pruner, None, "fallback");
        assert_eq!(c.complete(&req(AgentRole::Pruner, "x alpha y")).unwrap(), "A");
        assert_eq!(c.complete(&req(AgentRole::Pruner, "beta")).unwrap(), "fallback");
        assert_eq!(
            c.complete(&req(AgentRole::Generator, "beta")),
            Err(LlmError::Unscripted(AgentRole::Generator))
        );
        assert_eq!(c.requests().len(), 3);
    }

    #[test]
    fn retry_stops_on_non_retryable() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 5,
            base_delay_ms: 0,
        };
        let r: Result<(), _> = policy.run(|_| {
            calls.set(calls.get() + 1);
            Err(LlmError::Unavailable)
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 1);

        calls.set(0);
        let r = policy.run(|i| {
            calls.set(calls.get() + 1);
            if i < 2 {
                Err(LlmError::Transport("x".into()))
            } else {
                Ok(i)
            }
        });
        assert_eq!(r, Ok(2));
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn string_array_parsing() {
        assert_eq!(
            parse_string_array("```json\n[\"a\", \"b\"]\n```"),
            Some(vec!["a".to_string(), "b".to_string()])
        );
        assert_eq!(parse_string_array("sorry, no"), None);
        assert_eq!(parse_string_array("[1, 2]"), None);
    }

    #[test]
    fn in_flight_limit_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let limit = InFlightLimit::new(2);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = limit.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
