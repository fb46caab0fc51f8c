//! TOML configuration and engine assembly.
//!
//! Every field has a default, so an empty file (or none at all) gives a
//! working offline setup: hashed embeddings, the heuristic tagger and no LLM.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use signpost::embedding::{Embedder, HashedEmbedder, RemoteEmbedder};
use signpost::llm::{CompletionClient, InFlightLimit, NullClient, RemoteChatClient, RetryPolicy, ScriptedClient};
use signpost::prompts::PromptTemplates;
use signpost::tagging::{HeuristicTagger, LlmTagger, Tagger};
use signpost::{Agents, Engine, EngineConfig};

use crate::error::AppError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Where the index is persisted; in-memory only when unset.
    pub index_dir: Option<PathBuf>,
    pub engine: EngineConfig,
    pub embedder: EmbedderConfig,
    pub llm: LlmConfig,
    pub tagger: TaggerChoice,
    pub prompts: PromptConfig,
    pub server: ServerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    /// Deterministic feature hashing; no network.
    Hashed {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Remote {
        endpoint: String,
        model: String,
        dim: usize,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn default_dim() -> usize {
    256
}

fn default_batch() -> usize {
    32
}

fn default_in_flight() -> usize {
    4
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashed { dim: default_dim() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmBackend {
    /// No completion backend; every LLM seat degrades.
    #[default]
    None,
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
    /// Fixture rules `{"rules": [...]}` read from a JSON file.
    Scripted { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: LlmBackend,
    pub temperature: f32,
    pub retry: RetryPolicy,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: LlmBackend::None,
            temperature: 0.0,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerChoice {
    /// LLM tagging when a backend is configured, heuristic otherwise.
    #[default]
    Auto,
    Heuristic,
    Llm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Directory of `<name>.system.txt` / `<name>.user.txt` overrides.
    pub dir: Option<PathBuf>,
    pub domain: Option<String>,
    pub region_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub bind: String,
    /// Static bearer token; requests without it are refused.
    pub token: Option<String>,
    /// Environment variable holding the token, used when `token` is unset.
    pub token_env: Option<String>,
    /// Write the index to `index_dir` after every successful mutation.
    pub persist_on_write: bool,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            token: None,
            token_env: None,
            persist_on_write: true,
        }
    }
}

impl ServerSettings {
    pub fn resolved_token(&self) -> Option<String> {
        self.token
            .clone()
            .or_else(|| self.token_env.as_deref().and_then(|v| std::env::var(v).ok()))
            .filter(|t| !t.is_empty())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` overrides to a TOML table. Values parse as TOML
/// (numbers, booleans, arrays, inline tables) and fall back to strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), AppError> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| AppError::Usage(format!("override `{o}` is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(AppError::Usage(format!("override key `{key}` is malformed")));
        }
        let mut cur = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| AppError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

impl AppConfig {
    /// Reads `path` (if any), applies overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, AppError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| AppError::Data(format!("cannot read config `{}`: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| AppError::Data(format!("config `{}`: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        let config: AppConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Data(format!("config: {e}")))?;
        config.engine.validate().map_err(AppError::Data)?;
        Ok(config)
    }

    pub fn has_llm(&self) -> bool {
        !matches!(self.llm.backend, LlmBackend::None)
    }

    fn embedder(&self) -> Result<Arc<dyn Embedder>, AppError> {
        Ok(match &self.embedder {
            EmbedderConfig::Hashed { dim } => {
                if *dim == 0 {
                    return Err(AppError::Data("embedder dim must be positive".into()));
                }
                Arc::new(HashedEmbedder::new(*dim))
            }
            EmbedderConfig::Remote {
                endpoint,
                model,
                dim,
                api_key_env,
                batch_size,
                max_in_flight,
            } => Arc::new(RemoteEmbedder::new(
                endpoint.clone(),
                model.clone(),
                api_key(api_key_env.as_deref()),
                *dim,
                *batch_size,
                Arc::new(InFlightLimit::new(*max_in_flight)),
            )),
        })
    }

    fn client(&self) -> Result<Arc<dyn CompletionClient>, AppError> {
        Ok(match &self.llm.backend {
            LlmBackend::None => Arc::new(NullClient),
            LlmBackend::Remote {
                endpoint,
                model,
                api_key_env,
                max_in_flight,
            } => Arc::new(RemoteChatClient::new(
                endpoint.clone(),
                model.clone(),
                api_key(api_key_env.as_deref()),
                Arc::new(InFlightLimit::new(*max_in_flight)),
            )),
            LlmBackend::Scripted { path } => {
                let text = fs::read_to_string(path)
                    .map_err(|e| AppError::Data(format!("cannot read script `{}`: {e}", path.display())))?;
                Arc::new(
                    ScriptedClient::from_json(&text)
                        .map_err(|e| AppError::Data(format!("script `{}`: {e}", path.display())))?,
                )
            }
        })
    }

    fn templates(&self) -> Result<PromptTemplates, AppError> {
        let t = match &self.prompts.dir {
            Some(dir) => PromptTemplates::load_dir(dir)
                .map_err(|e| AppError::Data(format!("prompts `{}`: {e}", dir.display())))?,
            None => PromptTemplates::default(),
        };
        Ok(t.with_domain(
            self.prompts.domain.as_deref().unwrap_or("company profiles"),
            self.prompts.region_group.as_deref().unwrap_or("the region"),
        ))
    }

    /// Builds the engine, loading the persisted index from `index_dir` when
    /// one exists there.
    pub fn build_engine(&self) -> Result<Engine, AppError> {
        let embedder = self.embedder()?;
        let client = self.client()?;
        let templates = self.templates()?;
        let use_llm = match self.tagger {
            TaggerChoice::Auto => self.has_llm(),
            TaggerChoice::Heuristic => false,
            TaggerChoice::Llm => true,
        };
        let tagger: Arc<dyn Tagger> = if use_llm {
            Arc::new(LlmTagger::new(
                client.clone(),
                templates.master_tags.clone(),
                templates.paragraph_tags.clone(),
            ))
        } else {
            Arc::new(HeuristicTagger::new())
        };
        let agents = Agents {
            rewriter: client.clone(),
            pruner: client.clone(),
            generator: client,
            templates,
            retry: self.llm.retry,
            temperature: self.llm.temperature,
        };
        let engine = match self.index_dir.as_deref().filter(|d| index_exists(d)) {
            Some(dir) => Engine::open(dir, self.engine.clone(), embedder, tagger, agents)?,
            None => Engine::new(self.engine.clone(), embedder, tagger, agents)?,
        };
        Ok(engine)
    }
}

fn api_key(var: Option<&str>) -> Option<String> {
    var.and_then(|v| std::env::var(v).ok())
}

pub fn index_exists(dir: &Path) -> bool {
    dir.join("header").is_file()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_offline() {
        let c = AppConfig::load(None, &[]).unwrap();
        assert_eq!(c.embedder, EmbedderConfig::Hashed { dim: 256 });
        assert!(!c.has_llm());
        assert_eq!(c.engine, EngineConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = AppConfig::load(
            None,
            &[
                "engine.retrieval.k=9".into(),
                "engine.retrieval.weights={tag=0.5, sem=0.25, sparse=0.25}".into(),
                "engine.retrieval.pruning_enabled=false".into(),
                "embedder.kind=hashed".into(),
                "embedder.dim=32".into(),
                "index_dir=some/dir".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.engine.retrieval.k, 9);
        assert_eq!(c.engine.retrieval.weights.tag, 0.5);
        assert!(!c.engine.retrieval.pruning_enabled);
        assert_eq!(c.embedder, EmbedderConfig::Hashed { dim: 32 });
        assert_eq!(c.index_dir.as_deref(), Some(Path::new("some/dir")));
    }

    #[test]
    fn bad_values_are_data_errors() {
        assert!(matches!(
            AppConfig::load(None, &["engine.retrieval.k=0".into()]),
            Err(AppError::Data(_))
        ));
        assert!(matches!(AppConfig::load(None, &["nonsense=1".into()]), Err(AppError::Data(_))));
        assert!(matches!(AppConfig::load(None, &["novalue".into()]), Err(AppError::Usage(_))));
    }
}
