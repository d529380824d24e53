//! HTTP transport.
//!
//! | role            | path        | request                                   | response                 |
//! |-----------------|-------------|-------------------------------------------|--------------------------|
//! | sketch provider | `/generate` | `{"input", "num_hypotheses"}`             | `{"hypotheses": [..]}`   |
//! | aligner         | `/score`    | `{"sequences": [..]}`                     | `{"scores": [..]}`       |
//! | completer       | `/complete` | `{"prompt", "temperature", "top_p", "frequency_penalty"}` | `{"text"}` |
//! | encoder         | `/encode`   | `{"texts": [..]}`                         | `{"vectors": [[..], ..]}`|
//!
//! The completer can instead speak a chat-completions API: the prompt becomes
//! a single user message and the reply is read from
//! `choices[0].message.content`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ModelRequest, ModelResponse, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CompleterMode {
    #[default]
    Plain,
    Chat {
        #[serde(default = "default_chat_path")]
        path: String,
        model: String,
    },
}

fn default_chat_path() -> String {
    "/v1/chat/completions".to_string()
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    base_url: String,
    agent: ureq::Agent,
    auth_token: Option<String>,
    completer_mode: CompleterMode,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            auth_token: None,
            completer_mode: CompleterMode::Plain,
        }
    }

    pub fn with_auth_token(mut self, token: Option<String>) -> Self {
        self.auth_token = token;
        self
    }

    pub fn with_completer_mode(mut self, mode: CompleterMode) -> Self {
        self.completer_mode = mode;
        self
    }

    /// Path and JSON body for a request.
    pub fn request_body(&self, request: &ModelRequest) -> (String, Value) {
        match request {
            ModelRequest::Generate { input, num_hypotheses } => (
                "/generate".into(),
                json!({"input": input, "num_hypotheses": num_hypotheses}),
            ),
            ModelRequest::Score { sequences } => ("/score".into(), json!({"sequences": sequences})),
            ModelRequest::Encode { texts } => ("/encode".into(), json!({"texts": texts})),
            ModelRequest::Complete { prompt, params } => match &self.completer_mode {
                CompleterMode::Plain => (
                    "/complete".into(),
                    json!({
                        "prompt": prompt,
                        "temperature": params.temperature,
                        "top_p": params.top_p,
                        "frequency_penalty": params.frequency_penalty,
                    }),
                ),
                CompleterMode::Chat { path, model } => (
                    path.clone(),
                    json!({
                        "model": model,
                        "messages": [{"role": "user", "content": prompt}],
                        "temperature": params.temperature,
                        "top_p": params.top_p,
                        "frequency_penalty": params.frequency_penalty,
                    }),
                ),
            },
        }
    }

    /// Interprets a JSON response body for a request.
    pub fn decode_response(&self, request: &ModelRequest, body: &Value) -> Result<ModelResponse, TransportError> {
        let missing = |field: &str| TransportError::Protocol(format!("response lacks `{field}`: {body}"));
        match request {
            ModelRequest::Generate { .. } => {
                let hyps = body
                    .get("hypotheses")
                    .and_then(Value::as_array)
                    .and_then(|a| a.iter().map(|h| h.as_str().map(str::to_string)).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| missing("hypotheses"))?;
                Ok(ModelResponse::Hypotheses(hyps))
            }
            ModelRequest::Score { .. } => {
                let scores = body
                    .get("scores")
                    .and_then(Value::as_array)
                    .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| missing("scores"))?;
                Ok(ModelResponse::Scores(scores))
            }
            ModelRequest::Encode { .. } => {
                let vectors = body
                    .get("vectors")
                    .and_then(Value::as_array)
                    .and_then(|rows| {
                        rows.iter()
                            .map(|r| r.as_array().and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<_>>>()))
                            .collect::<Option<Vec<_>>>()
                    })
                    .ok_or_else(|| missing("vectors"))?;
                Ok(ModelResponse::Vectors(vectors))
            }
            ModelRequest::Complete { .. } => {
                let text = match &self.completer_mode {
                    CompleterMode::Plain => body.get("text").and_then(Value::as_str).ok_or_else(|| missing("text"))?,
                    CompleterMode::Chat { .. } => body
                        .pointer("/choices/0/message/content")
                        .and_then(Value::as_str)
                        .ok_or_else(|| missing("choices[0].message.content"))?,
                };
                Ok(ModelResponse::Text(text.to_string()))
            }
        }
    }
}

impl super::Transport for HttpTransport {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse, TransportError> {
        let (path, body) = self.request_body(request);
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.agent.post(&url);
        if let Some(token) = &self.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(t) => TransportError::Timeout(format!("{url}: {t}")),
            other => TransportError::Unavailable(format!("{url}: {other}")),
        })?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(TransportError::Unavailable(format!("{url}: http status {status}")));
        }
        if status >= 400 {
            return Err(TransportError::Protocol(format!("{url}: http status {status}")));
        }
        let value: Value = response.body_mut().read_json().map_err(|e| match e {
            ureq::Error::Timeout(t) => TransportError::Timeout(format!("{url}: {t}")),
            other => TransportError::Protocol(format!("{url}: invalid JSON body: {other}")),
        })?;
        self.decode_response(request, &value)
    }
}
