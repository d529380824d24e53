//! Client layer for the model services: sketch provider, aligner,
//! completer, and sentence encoder.
//!
//! All roles go through one [`ModelClient`], which adds retries with
//! exponential backoff, a per-endpoint in-flight bound, and an optional call
//! log on top of a [`Transport`]. Transports are HTTP ([`HttpTransport`]) or
//! in-process scripted stubs ([`StubTransport`]).

mod http;
mod stub;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{CompleterMode, HttpTransport};
pub use stub::{FnTransport, StubScript, StubTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SketchProvider,
    Aligner,
    Completer,
    Encoder,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::SketchProvider => "sketch provider",
            Role::Aligner => "aligner",
            Role::Completer => "completer",
            Role::Encoder => "encoder",
        })
    }
}

/// Completer sampling parameters; transmitted verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            frequency_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelRequest {
    Generate { input: String, num_hypotheses: usize },
    Score { sequences: Vec<String> },
    Complete { prompt: String, params: SamplingParams },
    Encode { texts: Vec<String> },
}

impl ModelRequest {
    pub fn role(&self) -> Role {
        match self {
            ModelRequest::Generate { .. } => Role::SketchProvider,
            ModelRequest::Score { .. } => Role::Aligner,
            ModelRequest::Complete { .. } => Role::Completer,
            ModelRequest::Encode { .. } => Role::Encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ModelResponse {
    Hypotheses(Vec<String>),
    Scores(Vec<f64>),
    Text(String),
    Vectors(Vec<Vec<f64>>),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl TransportError {
    fn retriable(&self) -> bool {
        !matches!(self, TransportError::Protocol(_))
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("{role} unavailable after {attempts} attempt(s): {last}")]
    ProviderUnavailable {
        role: Role,
        attempts: usize,
        last: String,
    },
    #[error("{role} protocol error: {message}")]
    Protocol { role: Role, message: String },
}

/// Sends one request and returns the raw response.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Additional attempts after the first failure.
    pub max_retries: usize,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff() -> Self {
        Self {
            base_backoff: Duration::ZERO,
            ..Self::default()
        }
    }

    fn backoff(&self, attempt: usize) -> Duration {
        self.base_backoff * 2u32.saturating_pow(attempt as u32)
    }
}

/// Counting semaphore bounding concurrent requests to one endpoint.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard { limiter: self }
    }
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.current.lock().unwrap() -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub attempt: usize,
    pub request: ModelRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<ModelResponse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Default)]
pub struct CallLog {
    records: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, record: CallRecord) {
        self.records.lock().unwrap().push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone)]
pub struct ModelClient {
    role: Role,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    limiter: Arc<InFlightLimiter>,
    log: Option<Arc<CallLog>>,
}

impl fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelClient")
            .field("role", &self.role)
            .field("retry", &self.retry)
            .field("max_in_flight", &self.limiter.max)
            .finish()
    }
}

impl ModelClient {
    pub fn new(role: Role, transport: Arc<dyn Transport>) -> Self {
        Self {
            role,
            transport,
            retry: RetryPolicy::default(),
            limiter: Arc::new(InFlightLimiter::new(8)),
            log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter = Arc::new(InFlightLimiter::new(max));
        self
    }

    pub fn with_log(mut self, log: Arc<CallLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn log(&self) -> Option<&Arc<CallLog>> {
        self.log.as_ref()
    }

    fn call(&self, request: ModelRequest) -> Result<ModelResponse, GatewayError> {
        debug_assert_eq!(request.role(), self.role);
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            let result = {
                let _slot = self.limiter.acquire();
                self.transport.send(&request)
            };
            if let Some(log) = &self.log {
                log.push(CallRecord {
                    role: self.role,
                    attempt: attempt + 1,
                    request: request.clone(),
                    response: result.as_ref().ok().cloned(),
                    error: result.as_ref().err().map(|e| e.to_string()),
                });
            }
            match result {
                Ok(response) => return Ok(response),
                Err(e) if e.retriable() => {
                    tracing::warn!(role = %self.role, attempt = attempt + 1, error = %e, "model request failed");
                    last = e.to_string();
                }
                Err(e) => {
                    return Err(GatewayError::Protocol {
                        role: self.role,
                        message: e.to_string(),
                    })
                }
            }
        }
        Err(GatewayError::ProviderUnavailable {
            role: self.role,
            attempts: self.retry.max_retries + 1,
            last,
        })
    }

    fn protocol(&self, message: impl Into<String>) -> GatewayError {
        GatewayError::Protocol {
            role: self.role,
            message: message.into(),
        }
    }

    /// Up to `k` hypotheses, best first.
    pub fn request_candidates(&self, task_input: &str, k: usize) -> Result<Vec<String>, GatewayError> {
        assert!(k >= 1, "k must be positive");
        match self.call(ModelRequest::Generate {
            input: task_input.to_string(),
            num_hypotheses: k,
        })? {
            ModelResponse::Hypotheses(mut h) => {
                h.truncate(k);
                Ok(h)
            }
            other => Err(self.protocol(format!("expected hypotheses, got {other:?}"))),
        }
    }

    /// One score in [0, 1] per sequence, same order.
    pub fn request_alignment_scores(&self, sequences: &[String]) -> Result<Vec<f64>, GatewayError> {
        match self.call(ModelRequest::Score {
            sequences: sequences.to_vec(),
        })? {
            ModelResponse::Scores(scores) => {
                if scores.len() != sequences.len() {
                    return Err(self.protocol(format!(
                        "{} sequences but {} scores",
                        sequences.len(),
                        scores.len()
                    )));
                }
                if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                    return Err(self.protocol(format!("score {bad} outside [0, 1]")));
                }
                Ok(scores)
            }
            other => Err(self.protocol(format!("expected scores, got {other:?}"))),
        }
    }

    pub fn request_completion(&self, prompt: &str, params: SamplingParams) -> Result<String, GatewayError> {
        match self.call(ModelRequest::Complete {
            prompt: prompt.to_string(),
            params,
        })? {
            ModelResponse::Text(t) => Ok(t),
            other => Err(self.protocol(format!("expected text, got {other:?}"))),
        }
    }

    /// One vector per text; all vectors share a dimension.
    pub fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        match self.call(ModelRequest::Encode { texts: texts.to_vec() })? {
            ModelResponse::Vectors(v) => {
                if v.len() != texts.len() {
                    return Err(self.protocol(format!("{} texts but {} vectors", texts.len(), v.len())));
                }
                if let Some(first) = v.first() {
                    if first.is_empty() || v.iter().any(|x| x.len() != first.len()) {
                        return Err(self.protocol("vectors have inconsistent dimensions"));
                    }
                }
                Ok(v)
            }
            other => Err(self.protocol(format!("expected vectors, got {other:?}"))),
        }
    }
}

/// Clients for every role used by the pipeline. The encoder is optional.
#[derive(Debug, Clone)]
pub struct Gateway {
    pub sketch: ModelClient,
    pub aligner: ModelClient,
    pub completer: ModelClient,
    pub encoder: Option<ModelClient>,
}

impl Gateway {
    /// Builds all four roles on one shared stub script.
    pub fn from_stub(script: StubScript) -> Self {
        let stub = StubTransport::new(script);
        let client = |role| ModelClient::new(role, Arc::new(stub.for_role(role))).with_retry(RetryPolicy::no_backoff());
        Self {
            sketch: client(Role::SketchProvider),
            aligner: client(Role::Aligner),
            completer: client(Role::Completer),
            encoder: Some(client(Role::Encoder)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn stub_client(role: Role, json: &str) -> ModelClient {
        let script = StubScript::from_json(json).unwrap();
        ModelClient::new(role, Arc::new(StubTransport::new(script).for_role(role)))
            .with_retry(RetryPolicy::no_backoff())
    }

    #[test]
    fn candidates_in_order_and_truncated() {
        let c = stub_client(
            Role::SketchProvider,
            r#"{"generate": {"q": [["SELECT t0.c0", "SELECT t0.c1", "SELECT t1.c0", "SELECT t1.c1", "SELECT t2.c0"]]}}"#,
        );
        let h = c.request_candidates("q", 4).unwrap();
        assert_eq!(h, vec!["SELECT t0.c0", "SELECT t0.c1", "SELECT t1.c0", "SELECT t1.c1"]);
        let short = stub_client(Role::SketchProvider, r#"{"generate": {"q": [["FROM t0"]]}}"#);
        assert_eq!(short.request_candidates("q", 2).unwrap().len(), 1);
    }

    #[test]
    fn score_validation() {
        let c = stub_client(Role::Aligner, r#"{"score": {"good": [0.9], "*": [0.1], "bad": [1.5]}}"#);
        let seqs: Vec<String> = (0..8).map(|i| if i == 3 { "good".into() } else { format!("s{i}") }).collect();
        let scores = c.request_alignment_scores(&seqs).unwrap();
        assert_eq!(scores.len(), 8);
        let best = scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 3);
        assert!(matches!(
            c.request_alignment_scores(&["bad".to_string()]),
            Err(GatewayError::Protocol { .. })
        ));
    }

    #[test]
    fn score_arity_mismatch() {
        let t = FnTransport::new(|_| Ok(ModelResponse::Scores(vec![0.5])));
        let c = ModelClient::new(Role::Aligner, Arc::new(t));
        assert!(matches!(
            c.request_alignment_scores(&["a".into(), "b".into()]),
            Err(GatewayError::Protocol { .. })
        ));
    }

    #[test]
    fn retry_after_timeout_is_logged() {
        let log = Arc::new(CallLog::new());
        let c = stub_client(Role::Completer, r#"{"complete": {"p": [{"error": "timeout"}, "SELECT 1"]}}"#)
            .with_log(log.clone());
        assert_eq!(c.request_completion("p", SamplingParams::default()).unwrap(), "SELECT 1");
        let records = log.records();
        assert_eq!(records.len(), 2);
        assert!(records[0].error.as_deref().unwrap().contains("timed out"));
        assert_eq!(records[1].attempt, 2);
    }

    #[test]
    fn gives_up_after_retries() {
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = calls.clone();
        let t = FnTransport::new(move |_| {
            counter.fetch_add(1, Ordering::SeqCst);
            Err(TransportError::Unavailable("connection refused".into()))
        });
        let c = ModelClient::new(Role::Completer, Arc::new(t)).with_retry(RetryPolicy::no_backoff());
        match c.request_completion("p", SamplingParams::default()) {
            Err(GatewayError::ProviderUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn in_flight_bound_holds() {
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c2, p2) = (current.clone(), peak.clone());
        let t = FnTransport::new(move |_| {
            let now = c2.fetch_add(1, Ordering::SeqCst) + 1;
            p2.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            c2.fetch_sub(1, Ordering::SeqCst);
            Ok(ModelResponse::Text("ok".into()))
        });
        let client = ModelClient::new(Role::Completer, Arc::new(t)).with_max_in_flight(3);
        std::thread::scope(|s| {
            for _ in 0..12 {
                let client = client.clone();
                s.spawn(move || {
                    for _ in 0..4 {
                        client.request_completion("p", SamplingParams::default()).unwrap();
                    }
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(peak.load(Ordering::SeqCst) >= 2);
    }

    #[test]
    fn encode_validation() {
        let c = stub_client(Role::Encoder, r#"{"encode": {"a": [[1.0, 0.0]], "b": [[0.0]]}}"#);
        assert_eq!(c.encode(&["a".into()]).unwrap(), vec![vec![1.0, 0.0]]);
        assert!(matches!(c.encode(&["a".into(), "b".into()]), Err(GatewayError::Protocol { .. })));
    }
}
