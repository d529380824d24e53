//! Run configuration, read from TOML.
//!
//! ```toml
//! k_select = 4
//! k_from = 2
//! k_keywords = 2
//! patience = 1
//! threshold = 0.65
//! backend = "encoder"          # fuzzy | embedding | encoder
//! encoder_fallback = true
//! embedding_path = "glove.6B.300d.txt"
//! match_mode = "multi_level"   # multi_level | column_only | table_only | database_only
//! value_cap = 10000
//! workers = 4
//! example_timeout_secs = 120
//! statement_timeout_secs = 30
//!
//! [sampling]
//! temperature = 0.0
//! top_p = 1.0
//! frequency_penalty = 0.0
//!
//! [endpoints.completer]
//! base_url = "http://localhost:8003"
//! timeout_secs = 60
//! max_in_flight = 8
//! mode = "chat"
//! model = "some-model"
//! ```
//!
//! Endpoint tokens are read from `SKETCH_TOKEN`, `ALIGNER_TOKEN`,
//! `COMPLETER_TOKEN` and `ENCODER_TOKEN` only.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{EmbeddingTable, MatchMode, MatchOptions, SentenceEncoder, SimilarityBackend};
use crate::gateway::{CallLog, CompleterMode, Gateway, HttpTransport, ModelClient, Role, SamplingParams, StubScript};
use crate::selection::SelectionConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("no {0} endpoint configured")]
    MissingEndpoint(Role),
    #[error("embedding table: {0}")]
    Embedding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Fuzzy,
    Embedding,
    #[default]
    Encoder,
}

impl std::str::FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fuzzy" => Ok(BackendChoice::Fuzzy),
            "embedding" => Ok(BackendChoice::Embedding),
            "encoder" => Ok(BackendChoice::Encoder),
            other => Err(format!("unknown backend `{other}` (fuzzy, embedding, encoder)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_endpoint_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// `plain` or `chat`; completer only.
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub chat_path: Option<String>,
}

fn default_endpoint_timeout() -> f64 {
    60.0
}

fn default_max_in_flight() -> usize {
    8
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_secs: default_endpoint_timeout(),
            max_in_flight: default_max_in_flight(),
            mode: None,
            model: None,
            chat_path: None,
        }
    }

    fn completer_mode(&self) -> Result<CompleterMode, ConfigError> {
        match self.mode.as_deref() {
            None | Some("plain") => Ok(CompleterMode::Plain),
            Some("chat") => Ok(CompleterMode::Chat {
                path: self.chat_path.clone().unwrap_or_else(|| "/v1/chat/completions".into()),
                model: self
                    .model
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("chat mode needs `model`".into()))?,
            }),
            Some(other) => Err(ConfigError::Invalid(format!("unknown completer mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub sketch: Option<EndpointConfig>,
    pub aligner: Option<EndpointConfig>,
    pub completer: Option<EndpointConfig>,
    pub encoder: Option<EndpointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k_select: usize,
    pub k_from: usize,
    pub k_keywords: usize,
    pub patience: usize,
    pub threshold: f64,
    pub backend: BackendChoice,
    pub encoder_fallback: bool,
    pub embedding_path: Option<PathBuf>,
    pub match_mode: MatchMode,
    pub value_cap: usize,
    pub workers: usize,
    pub example_timeout_secs: f64,
    pub statement_timeout_secs: f64,
    pub sampling: SamplingParams,
    pub endpoints: Endpoints,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_select: crate::sketch::DEFAULT_K_SELECT,
            k_from: crate::sketch::DEFAULT_K_FROM,
            k_keywords: crate::sketch::DEFAULT_K_KEYWORDS,
            patience: crate::selection::DEFAULT_PATIENCE,
            threshold: crate::calibration::DEFAULT_THRESHOLD,
            backend: BackendChoice::Encoder,
            encoder_fallback: true,
            embedding_path: None,
            match_mode: MatchMode::MultiLevel,
            value_cap: crate::calibration::DEFAULT_VALUE_CAP,
            workers: 1,
            example_timeout_secs: 120.0,
            statement_timeout_secs: 30.0,
            sampling: SamplingParams::default(),
            endpoints: Endpoints::default(),
        }
    }
}

fn env_token(role: Role) -> Option<String> {
    let var = match role {
        Role::SketchProvider => "SKETCH_TOKEN",
        Role::Aligner => "ALIGNER_TOKEN",
        Role::Completer => "COMPLETER_TOKEN",
        Role::Encoder => "ENCODER_TOKEN",
    };
    std::env::var(var).ok().filter(|t| !t.is_empty())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k_select == 0 || self.k_from == 0 || self.k_keywords == 0 {
            return invalid("k_select, k_from and k_keywords must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return invalid("threshold must lie in (0, 1]");
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1");
        }
        if self.value_cap == 0 {
            return invalid("value_cap must be at least 1");
        }
        if !(self.example_timeout_secs > 0.0) || !(self.statement_timeout_secs > 0.0) {
            return invalid("timeouts must be positive");
        }
        for e in [&self.endpoints.sketch, &self.endpoints.aligner, &self.endpoints.completer, &self.endpoints.encoder]
            .into_iter()
            .flatten()
        {
            if !(e.timeout_secs > 0.0) || e.max_in_flight == 0 {
                return invalid("endpoint timeout and max_in_flight must be positive");
            }
        }
        if let Some(c) = &self.endpoints.completer {
            c.completer_mode()?;
        }
        Ok(())
    }

    pub fn example_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.example_timeout_secs)
    }

    pub fn statement_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.statement_timeout_secs)
    }

    /// HTTP client for one role, if its endpoint is configured.
    pub fn client(&self, role: Role) -> Result<Option<ModelClient>, ConfigError> {
        let e = &self.endpoints;
        let cfg = match role {
            Role::SketchProvider => &e.sketch,
            Role::Aligner => &e.aligner,
            Role::Completer => &e.completer,
            Role::Encoder => &e.encoder,
        };
        let Some(cfg) = cfg else { return Ok(None) };
        let mut transport = HttpTransport::new(cfg.base_url.clone(), Duration::from_secs_f64(cfg.timeout_secs))
            .with_auth_token(env_token(role));
        if role == Role::Completer {
            transport = transport.with_completer_mode(cfg.completer_mode()?);
        }
        Ok(Some(ModelClient::new(role, Arc::new(transport)).with_max_in_flight(cfg.max_in_flight)))
    }

    /// Model clients from the stub script if given, otherwise from the
    /// configured endpoints. The encoder is optional.
    pub fn gateway(&self, stub: Option<StubScript>, log: Option<Arc<CallLog>>) -> Result<Gateway, ConfigError> {
        let mut gateway = match stub {
            Some(script) => Gateway::from_stub(script),
            None => {
                let required = |role| self.client(role)?.ok_or(ConfigError::MissingEndpoint(role));
                Gateway {
                    sketch: required(Role::SketchProvider)?,
                    aligner: required(Role::Aligner)?,
                    completer: required(Role::Completer)?,
                    encoder: self.client(Role::Encoder)?,
                }
            }
        };
        if let Some(log) = log {
            gateway.sketch = gateway.sketch.with_log(log.clone());
            gateway.aligner = gateway.aligner.with_log(log.clone());
            gateway.completer = gateway.completer.with_log(log.clone());
            gateway.encoder = gateway.encoder.map(|c| c.with_log(log));
        }
        Ok(gateway)
    }

    pub fn backend(&self, gateway: &Gateway) -> Result<SimilarityBackend, ConfigError> {
        match self.backend {
            BackendChoice::Fuzzy => Ok(SimilarityBackend::CharacterFuzzy),
            BackendChoice::Embedding => {
                let path = self
                    .embedding_path
                    .as_ref()
                    .ok_or_else(|| ConfigError::Embedding("backend `embedding` needs `embedding_path`".into()))?;
                let table = EmbeddingTable::load(path).map_err(|e| ConfigError::Embedding(e.to_string()))?;
                Ok(SimilarityBackend::WordEmbedding(Arc::new(table)))
            }
            BackendChoice::Encoder => match &gateway.encoder {
                Some(client) => Ok(SimilarityBackend::SentenceEncoder(Arc::new(SentenceEncoder::new(
                    client.clone(),
                    self.encoder_fallback,
                )))),
                None if self.encoder_fallback => {
                    tracing::warn!("no encoder endpoint; using character similarity");
                    Ok(SimilarityBackend::CharacterFuzzy)
                }
                None => Err(ConfigError::MissingEndpoint(Role::Encoder)),
            },
        }
    }

    pub fn selection(&self, backend: SimilarityBackend) -> SelectionConfig {
        SelectionConfig {
            patience: self.patience,
            match_options: MatchOptions {
                threshold: self.threshold,
                value_cap: self.value_cap,
            },
            match_mode: self.match_mode,
            backend,
            sampling: self.sampling,
        }
    }

    pub fn pipeline(&self, backend: SimilarityBackend) -> crate::pipeline::PipelineConfig {
        crate::pipeline::PipelineConfig {
            k_select: self.k_select,
            k_from: self.k_from,
            k_keywords: self.k_keywords,
            selection: self.selection(backend),
        }
    }
}
