//! Run configuration (TOML) and the reproducibility manifest.
//!
//! A [`RunConfig`] names every input of a pipeline run — ontology, corpus,
//! chunking and traversal parameters, and one provider spec per role — and
//! is the single artifact the command-line front end consumes. Each run
//! echoes its configuration into a [`RunManifest`] together with content
//! fingerprints and provider call counts, so a result can be audited and
//! reproduced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::Protocol;
use crate::provider::{ChatProvider, HttpChatConfig, HttpChatProvider, ProviderError, ScriptedProvider};
use crate::retrieval::{
    Embedder, HashEmbedder, HttpEmbedder, HttpEmbedderConfig, HttpReranker, HttpRerankerConfig,
    PassThroughReranker, Reranker, DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE, DEFAULT_TOP_N,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field} path does not exist: {path}")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("script file {path}: {message}")]
    Script { path: PathBuf, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Annotation method to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Duo,
    OneShotShort,
    OneShotLong,
    Rag,
    CotRag,
    SelfRefineRag,
}

impl Method {
    pub fn protocol(&self) -> Protocol {
        match self {
            Method::Duo => Protocol::Duo,
            Method::OneShotShort => Protocol::ShortContext,
            Method::OneShotLong => Protocol::LongContext,
            Method::Rag => Protocol::Rag,
            Method::CotRag => Protocol::CotRag,
            Method::SelfRefineRag => Protocol::SelfRefineRag,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "duo" => Ok(Method::Duo),
            "one_shot_short" => Ok(Method::OneShotShort),
            "one_shot_long" => Ok(Method::OneShotLong),
            "rag" => Ok(Method::Rag),
            "cot_rag" => Ok(Method::CotRag),
            "self_refine_rag" => Ok(Method::SelfRefineRag),
            other => Err(format!(
                "unknown method '{other}' (expected duo, one_shot_short, one_shot_long, rag, \
                 cot_rag, or self_refine_rag)"
            )),
        }
    }
}

/// A chat-provider role binding: deterministic script or remote endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatSpec {
    /// Replay a script file (JSON list of matcher/response entries).
    Scripted {
        script: PathBuf,
        #[serde(default)]
        strict: bool,
    },
    /// OpenAI-style chat-completions endpoint.
    Http(HttpChatConfig),
}

/// Embedder binding: built-in hashing embedder or a remote endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Hash {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http(HttpEmbedderConfig),
}

fn default_dimension() -> usize {
    HashEmbedder::DEFAULT_DIMENSION
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hash { dimension: default_dimension() }
    }
}

/// Reranker binding: similarity pass-through or a remote endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RerankerSpec {
    #[default]
    PassThrough,
    Http(HttpRerankerConfig),
}

/// Provider bindings for every role a run can exercise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpecs {
    pub explorer: ChatSpec,
    pub evaluator: ChatSpec,
    /// Catalog-linking and faithfulness judge; defaults to the evaluator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<ChatSpec>,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub reranker: RerankerSpec,
}

fn default_k() -> usize {
    2
}
fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}
fn default_overlap() -> usize {
    DEFAULT_CHUNK_OVERLAP
}
fn default_top_n() -> usize {
    DEFAULT_TOP_N
}
fn default_max_rounds() -> u32 {
    crate::agents::DEFAULT_MAX_ROUNDS
}
fn default_workers() -> usize {
    1
}
fn default_method() -> Method {
    Method::Duo
}
fn default_prioritized() -> bool {
    true
}
fn default_short_context_tokens() -> usize {
    crate::agents::DEFAULT_SHORT_CONTEXT_TOKENS
}
fn default_long_context_tokens() -> usize {
    crate::agents::DEFAULT_LONG_CONTEXT_TOKENS
}

/// Everything a pipeline run needs, loadable from TOML. Relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub ontology: PathBuf,
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_short_context_tokens")]
    pub short_context_tokens: usize,
    #[serde(default = "default_long_context_tokens")]
    pub long_context_tokens: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Disable to traverse the ontology without the priority ordering
    /// (ablation runs).
    #[serde(default = "default_prioritized")]
    pub prioritized: bool,
    /// Optional template cache file (created on first use).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_cache: Option<PathBuf>,
    /// Optional gold-standard file for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PathBuf>,
    pub providers: ProviderSpecs,
}

impl RunConfig {
    /// Reads and validates a TOML config; relative paths become absolute
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.ontology);
        resolve(&mut self.corpus);
        resolve(&mut self.output_dir);
        if let Some(cache) = &mut self.template_cache {
            resolve(cache);
        }
        if let Some(gold) = &mut self.gold {
            resolve(gold);
        }
        let resolve_chat = |spec: &mut ChatSpec| {
            if let ChatSpec::Scripted { script, .. } = spec {
                resolve(script);
            }
        };
        resolve_chat(&mut self.providers.explorer);
        resolve_chat(&mut self.providers.evaluator);
        if let Some(judge) = &mut self.providers.judge {
            resolve_chat(judge);
        }
    }

    /// Invariant checks: parameter ranges and input-path existence.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(ConfigError::Invalid("chunk_size must be positive".into()));
        }
        if self.overlap >= self.chunk_size {
            return Err(ConfigError::Invalid(format!(
                "overlap ({}) must be smaller than chunk_size ({})",
                self.overlap, self.chunk_size
            )));
        }
        if self.top_n == 0 {
            return Err(ConfigError::Invalid("top_n must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(ConfigError::Invalid("max_rounds must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        let exists = |field: &'static str, path: &Path| {
            if path.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingPath { field, path: path.to_path_buf() })
            }
        };
        exists("ontology", &self.ontology)?;
        exists("corpus", &self.corpus)?;
        if let Some(gold) = &self.gold {
            exists("gold", gold)?;
        }
        let check_chat = |role: &'static str, spec: &ChatSpec| match spec {
            ChatSpec::Scripted { script, .. } => exists(role, script),
            ChatSpec::Http(_) => Ok(()),
        };
        check_chat("providers.explorer script", &self.providers.explorer)?;
        check_chat("providers.evaluator script", &self.providers.evaluator)?;
        if let Some(judge) = &self.providers.judge {
            check_chat("providers.judge script", judge)?;
        }
        Ok(())
    }

    /// The judge spec (defaults to the evaluator binding).
    pub fn judge_spec(&self) -> &ChatSpec {
        self.providers.judge.as_ref().unwrap_or(&self.providers.evaluator)
    }
}

// ---------------------------------------------------------------------------
// Script files and provider construction
// ---------------------------------------------------------------------------

/// One scripted exchange: `matcher` is a substring the request must contain
/// (empty = match anything), `response` is replayed verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntryFile {
    #[serde(default)]
    pub matcher: String,
    pub response: String,
}

/// Loads a JSON script file (a list of [`ScriptEntryFile`]) into a
/// deterministic provider named after the role.
pub fn load_scripted_provider(
    name: &str,
    path: &Path,
    strict: bool,
) -> Result<ScriptedProvider, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Script { path: path.to_path_buf(), message: e.to_string() })?;
    let entries: Vec<ScriptEntryFile> = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Script { path: path.to_path_buf(), message: e.to_string() })?;
    let mut provider = ScriptedProvider::new(name).strict(strict);
    for entry in entries {
        provider = provider.respond(entry.matcher, entry.response);
    }
    Ok(provider)
}

/// Instantiates a chat provider for a role.
pub fn build_chat_provider(
    name: &str,
    spec: &ChatSpec,
) -> Result<Box<dyn ChatProvider>, ConfigError> {
    match spec {
        ChatSpec::Scripted { script, strict } => {
            Ok(Box::new(load_scripted_provider(name, script, *strict)?))
        }
        ChatSpec::Http(config) => Ok(Box::new(HttpChatProvider::new(config.clone())?)),
    }
}

/// Instantiates the embedder.
pub fn build_embedder(spec: &EmbedderSpec) -> Result<Box<dyn Embedder>, ConfigError> {
    match spec {
        EmbedderSpec::Hash { dimension } => Ok(Box::new(HashEmbedder::new(*dimension))),
        EmbedderSpec::Http(config) => Ok(Box::new(HttpEmbedder::new(config.clone())?)),
    }
}

/// Instantiates the reranker.
pub fn build_reranker(spec: &RerankerSpec) -> Result<Box<dyn Reranker>, ConfigError> {
    match spec {
        RerankerSpec::PassThrough => Ok(Box::new(PassThroughReranker)),
        RerankerSpec::Http(config) => Ok(Box::new(HttpReranker::new(config.clone())?)),
    }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Content fingerprint of the bundled prompt assets; changes whenever any
/// agent prompt text changes.
pub fn prompts_fingerprint() -> String {
    use crate::agents::prompt_text as p;
    let mut hasher = Sha256::new();
    for text in [
        p::EXPLORER_SYSTEM,
        p::EXPLORER_USER,
        p::EXPLORER_REVISE,
        p::EVALUATOR_REVIEW,
        p::ASPECT_EXTRACT,
        p::COMPLETENESS_EXPAND,
        p::BASELINE_BACKGROUND,
        p::COT_FOLLOWUP_1,
        p::COT_FOLLOWUP_2,
        p::SELF_REFINE_FEEDBACK_1,
        p::SELF_REFINE_REFINE_1,
        p::SELF_REFINE_FEEDBACK_2,
        p::SELF_REFINE_REFINE_2,
        p::FAITHFULNESS,
        p::CATALOG_LINK,
    ] {
        hasher.update(text.as_bytes());
        hasher.update([0x1e]);
    }
    crate::ontology::hex(&hasher.finalize()[..8])
}

/// Reproducibility record written next to every command's outputs: the full
/// configuration echo, content fingerprints of the inputs, and how many
/// provider calls the run spent. Contains no timestamps, so reruns compare
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub ontology_fingerprint: String,
    pub prompts_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_cache_fingerprint: Option<String>,
    /// doc_id → source path, for provenance audits.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub corpus_manifest: BTreeMap<String, String>,
    /// Role → number of chat/embedding calls spent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provider_calls: BTreeMap<String, usize>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, ontology_fingerprint: String) -> Self {
        RunManifest {
            schema_version: crate::SCHEMA_VERSION,
            command: command.to_string(),
            config: config.clone(),
            ontology_fingerprint,
            prompts_fingerprint: prompts_fingerprint(),
            template_cache_fingerprint: None,
            corpus_manifest: BTreeMap::new(),
            provider_calls: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| ConfigError::Invalid(format!("manifest serialization: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid(format!("manifest parse: {e}")))
    }
}
