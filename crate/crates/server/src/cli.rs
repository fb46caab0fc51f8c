//! Command-line entry points. Each subcommand runs the same operation as the
//! matching /v1 endpoint.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 backend error.

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use signpost::corpus::{load_corpus, load_qa, CorpusSchema};
use signpost::eval::{run_benchmark, BenchmarkConfig, Method};
use signpost::index::TagScope;

use crate::api::{self, AppState, IngestRequest, QueryRequest, TagEditRequest};
use crate::config::{index_exists, AppConfig};
use crate::error::{ApiError, AppError};

#[derive(Debug, Parser)]
#[command(name = "signpost", version, about = "Semantic-path hybrid retrieval")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `-s engine.retrieval.k=10`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Index directory (overrides `index_dir`).
    #[arg(long, global = true)]
    pub index_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a corpus into the index directory.
    Ingest {
        /// Profile directory or JSONL file.
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Schema::Profiles)]
        schema: Schema,
        #[arg(long)]
        actor: Option<String>,
    },
    /// Query the index and print the result as JSON.
    Query {
        question: String,
        #[arg(short)]
        k: Option<usize>,
        /// Print the full debug trace.
        #[arg(long)]
        debug: bool,
        /// Generate an answer (needs an LLM backend).
        #[arg(long)]
        generate: bool,
    },
    /// Run the benchmark and print the results table.
    Eval(EvalArgs),
    /// Inject or remove a tag.
    Tag {
        #[command(subcommand)]
        action: TagAction,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Bearer token required on every endpoint except health.
        #[arg(long)]
        token: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schema {
    Profiles,
    Jsonl,
}

impl From<Schema> for CorpusSchema {
    fn from(s: Schema) -> Self {
        match s {
            Schema::Profiles => CorpusSchema::Profiles,
            Schema::Jsonl => CorpusSchema::JsonLines,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus to ingest first; the existing index is used when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Schema::Profiles)]
    pub schema: Schema,
    /// JSONL file of `{question, answer, doc_id}` records.
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "pipeline,vss,sparse,hybrid")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub generation_k: usize,
    /// Skip answer generation and ROUGE-L.
    #[arg(long)]
    pub no_generate: bool,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TagAction {
    Inject(TagArgs),
    Remove(TagArgs),
}

#[derive(Debug, Args)]
pub struct TagArgs {
    /// Document id (document scope) or chunk id (chunk scope).
    pub target: String,
    pub tag: String,
    #[arg(long, value_enum, default_value_t = Scope::Document)]
    pub scope: Scope,
    /// Report the target's distance and rank for this query before and
    /// after the edit.
    #[arg(long)]
    pub probe: Option<String>,
    #[arg(long)]
    pub actor: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Document,
    Chunk,
}

impl From<ApiError> for AppError {
    fn from(e: ApiError) -> Self {
        let message = if e.body.detail.is_null() {
            e.body.message
        } else {
            format!("{}\n{}", e.body.message, e.body.detail)
        };
        if e.status.is_server_error() && e.status.as_u16() != 500 {
            AppError::Backend(message)
        } else {
            AppError::Data(message)
        }
    }
}

/// Writes to stdout, treating a closed pipe (`| head`) as success.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            log::error!("cannot write output: {e}");
        }
    }
}

fn print_json<T: Serialize>(v: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("output serializes")));
}

fn state(config: &AppConfig, persist: bool) -> Result<AppState, AppError> {
    let engine = Arc::new(config.build_engine()?);
    Ok(AppState {
        engine,
        token: config.server.resolved_token(),
        persist_dir: if persist { config.index_dir.clone() } else { None },
        llm_configured: config.has_llm(),
    })
}

fn existing_index(config: &AppConfig) -> Result<(), AppError> {
    match &config.index_dir {
        Some(dir) if index_exists(dir) => Ok(()),
        Some(dir) => Err(AppError::Data(format!("no index in `{}`; run `signpost ingest` first", dir.display()))),
        None => Err(AppError::Usage("an index directory is required (--index-dir or index_dir)".into())),
    }
}

fn run_command(cli: Cli) -> Result<(), AppError> {
    let mut config = AppConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if cli.index_dir.is_some() {
        config.index_dir = cli.index_dir;
    }
    match cli.command {
        Command::Ingest { path, schema, actor } => {
            if config.index_dir.is_none() {
                return Err(AppError::Usage("an index directory is required (--index-dir or index_dir)".into()));
            }
            let state = state(&config, true)?;
            let response = api::run_ingest(
                &state,
                IngestRequest {
                    corpus_path: Some(path),
                    schema: Some(schema.into()),
                    actor: Some(actor.unwrap_or_else(|| "cli".into())),
                    ..Default::default()
                },
            )?;
            print_json(&response);
        }
        Command::Query {
            question,
            k,
            debug,
            generate,
        } => {
            existing_index(&config)?;
            let state = state(&config, false)?;
            let response = api::run_query(
                &state.engine,
                &QueryRequest {
                    question,
                    k,
                    debug,
                    generate,
                },
            )?;
            print_json(&response);
        }
        Command::Eval(args) => eval(&config, args)?,
        Command::Tag { action } => {
            existing_index(&config)?;
            let state = state(&config, true)?;
            let (inject, args) = match action {
                TagAction::Inject(a) => (true, a),
                TagAction::Remove(a) => (false, a),
            };
            let scope = match args.scope {
                Scope::Document => TagScope::Document,
                Scope::Chunk => TagScope::Chunk,
            };
            let response = api::run_tag_edit(
                &state,
                &args.target,
                scope,
                inject,
                TagEditRequest {
                    tag: args.tag,
                    probe_query: args.probe,
                    actor: Some(args.actor.unwrap_or_else(|| "cli".into())),
                },
            )?;
            print_json(&response);
        }
        Command::Serve { bind, token } => {
            let mut state = state(&config, config.server.persist_on_write)?;
            if token.is_some() {
                state.token = token;
            }
            let bind = bind.unwrap_or_else(|| config.server.bind.clone());
            let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::Data(e.to_string()))?;
            runtime
                .block_on(api::serve(state, &bind))
                .map_err(|e| AppError::Data(format!("server on `{bind}`: {e}")))?;
        }
    }
    Ok(())
}

fn eval(config: &AppConfig, args: EvalArgs) -> Result<(), AppError> {
    let methods = args
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(AppError::Usage)?;
    let qa = load_qa(&args.qa).map_err(|e| AppError::Data(e.to_string()))?;
    let docs = match &args.corpus {
        Some(path) => load_corpus(path, args.schema.into()).map_err(|e| AppError::Data(e.to_string()))?,
        None => {
            existing_index(config)?;
            Vec::new()
        }
    };
    // a fresh corpus is evaluated in memory, never mixed into a stored index
    let mut config = config.clone();
    if args.corpus.is_some() {
        config.index_dir = None;
    }
    let engine = config.build_engine()?;
    let bench = BenchmarkConfig {
        ks: args.ks,
        generation_k: args.generation_k,
        generate: !args.no_generate,
        concurrency: args.concurrency,
    };
    let report = run_benchmark(&engine, docs, &qa, &methods, &bench)?;
    emit(&report.render_table());
    if let Some(path) = args.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json).map_err(|e| AppError::Data(format!("`{}`: {e}", path.display())))?;
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run_command(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
