//! Deterministic in-process transports.
//!
//! A stub script is a JSON document with one section per role:
//!
//! ```json
//! {
//!   "generate": { "<task input>": [["SELECT t0.c1", "SELECT t0.c2"]] },
//!   "score":    { "<aligner sequence>": [0.9], "*": [0.1] },
//!   "complete": { "contains:timmothy ward": ["SELECT ...", {"error": "timeout"}] },
//!   "encode":   { "timmy": [[0.9, 0.1]] }
//! }
//! ```
//!
//! Keys are fingerprints: the exact request text, `contains:<substring>`,
//! or `*`. Lookup tries the exact key, then `contains:` keys in file order,
//! then `*`. Each key maps to a list of responses consumed in order; the last
//! one repeats once the list is exhausted. `score` and `encode` look up each
//! sequence or text separately. `{"error": "timeout" | "unavailable" |
//! "protocol", "message": ...}` simulates a failure.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde_json::{Map, Value};

use super::{ModelRequest, ModelResponse, Role, Transport, TransportError};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StubScript {
    sections: HashMap<&'static str, Vec<(String, Vec<Value>)>>,
}

const SECTIONS: [&str; 4] = ["generate", "score", "complete", "encode"];

fn section_for(role: Role) -> &'static str {
    match role {
        Role::SketchProvider => "generate",
        Role::Aligner => "score",
        Role::Completer => "complete",
        Role::Encoder => "encode",
    }
}

impl StubScript {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let root: Value = serde_json::from_str(text).map_err(|e| format!("stub script: {e}"))?;
        Self::from_value(&root)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn from_value(root: &Value) -> Result<Self, String> {
        let obj = root.as_object().ok_or("stub script must be a JSON object")?;
        let mut sections = HashMap::new();
        for (name, body) in obj {
            let section = SECTIONS
                .iter()
                .find(|s| *s == name)
                .ok_or_else(|| format!("unknown stub section `{name}`"))?;
            let entries = body
                .as_object()
                .ok_or_else(|| format!("section `{name}` must be an object"))?;
            let mut list = Vec::with_capacity(entries.len());
            for (key, responses) in entries {
                let responses = match responses {
                    // a bare hypothesis list is shorthand for a one-response script
                    Value::Array(items)
                        if *section == "generate" && !items.is_empty() && items.iter().all(Value::is_string) =>
                    {
                        vec![responses.clone()]
                    }
                    Value::Array(items) => items.clone(),
                    other => vec![other.clone()],
                };
                if responses.is_empty() {
                    return Err(format!("`{name}`/`{key}` has no responses"));
                }
                list.push((key.clone(), responses));
            }
            sections.insert(*section, list);
        }
        Ok(Self { sections })
    }

    /// Adds (or extends) an entry programmatically.
    pub fn push(&mut self, role: Role, key: impl Into<String>, response: Value) -> &mut Self {
        let key = key.into();
        let list = self.sections.entry(section_for(role)).or_default();
        match list.iter_mut().find(|(k, _)| *k == key) {
            Some((_, responses)) => responses.push(response),
            None => list.push((key, vec![response])),
        }
        self
    }

    pub fn to_value(&self) -> Value {
        let mut root = Map::new();
        for section in SECTIONS {
            if let Some(entries) = self.sections.get(section) {
                let mut obj = Map::new();
                for (k, v) in entries {
                    obj.insert(k.clone(), Value::Array(v.clone()));
                }
                root.insert(section.to_string(), Value::Object(obj));
            }
        }
        Value::Object(root)
    }

    fn lookup(&self, section: &str, fingerprint: &str) -> Option<usize> {
        let entries = self.sections.get(section)?;
        entries
            .iter()
            .position(|(k, _)| k == fingerprint)
            .or_else(|| {
                entries.iter().position(|(k, _)| {
                    k.strip_prefix("contains:").is_some_and(|needle| fingerprint.contains(needle))
                })
            })
            .or_else(|| entries.iter().position(|(k, _)| k == "*"))
    }
}

#[derive(Debug, Default)]
struct StubState {
    script: StubScript,
    cursors: HashMap<(&'static str, usize), usize>,
}

impl StubState {
    fn next(&mut self, section: &'static str, fingerprint: &str) -> Result<Value, TransportError> {
        let idx = self.script.lookup(section, fingerprint).ok_or_else(|| {
            TransportError::Protocol(format!("no `{section}` stub entry matches {fingerprint:?}"))
        })?;
        let responses = &self.script.sections[section][idx].1;
        let cursor = self.cursors.entry((section, idx)).or_insert(0);
        let value = responses[(*cursor).min(responses.len() - 1)].clone();
        *cursor += 1;
        if let Some(err) = value.as_object().and_then(|o| o.get("error")) {
            let message = value
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("scripted failure")
                .to_string();
            return Err(match err.as_str() {
                Some("timeout") => TransportError::Timeout(message),
                Some("protocol") => TransportError::Protocol(message),
                _ => TransportError::Unavailable(message),
            });
        }
        Ok(value)
    }
}

/// Script-driven transport. Clones share consumption state, so one script
/// can serve several roles; access is serialized.
#[derive(Debug, Clone)]
pub struct StubTransport {
    state: Arc<Mutex<StubState>>,
    role: Option<Role>,
}

impl StubTransport {
    pub fn new(script: StubScript) -> Self {
        Self {
            state: Arc::new(Mutex::new(StubState {
                script,
                cursors: HashMap::new(),
            })),
            role: None,
        }
    }

    /// A view of the same script restricted to one role.
    pub fn for_role(&self, role: Role) -> Self {
        Self {
            state: self.state.clone(),
            role: Some(role),
        }
    }
}

fn bad(section: &str, v: &Value) -> TransportError {
    TransportError::Protocol(format!("malformed `{section}` stub response: {v}"))
}

impl Transport for StubTransport {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse, TransportError> {
        if let Some(role) = self.role {
            if request.role() != role {
                return Err(TransportError::Protocol(format!("{role} stub received a {} request", request.role())));
            }
        }
        let mut state = self.state.lock().unwrap();
        match request {
            ModelRequest::Generate { input, .. } => {
                let v = state.next("generate", input)?;
                let items = v.as_array().ok_or_else(|| bad("generate", &v))?;
                let hyps = items
                    .iter()
                    .map(|h| h.as_str().map(str::to_string).ok_or_else(|| bad("generate", &v)))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ModelResponse::Hypotheses(hyps))
            }
            ModelRequest::Score { sequences } => {
                let mut scores = Vec::with_capacity(sequences.len());
                for s in sequences {
                    let v = state.next("score", s)?;
                    scores.push(v.as_f64().ok_or_else(|| bad("score", &v))?);
                }
                Ok(ModelResponse::Scores(scores))
            }
            ModelRequest::Complete { prompt, .. } => {
                let v = state.next("complete", prompt)?;
                Ok(ModelResponse::Text(v.as_str().ok_or_else(|| bad("complete", &v))?.to_string()))
            }
            ModelRequest::Encode { texts } => {
                let mut vectors = Vec::with_capacity(texts.len());
                for t in texts {
                    let v = state.next("encode", t)?;
                    let vec = v
                        .as_array()
                        .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                        .ok_or_else(|| bad("encode", &v))?;
                    vectors.push(vec);
                }
                Ok(ModelResponse::Vectors(vectors))
            }
        }
    }
}

type Handler = dyn Fn(&ModelRequest) -> Result<ModelResponse, TransportError> + Send + Sync;

/// Closure-backed transport for tests and embedding.
#[derive(Clone)]
pub struct FnTransport {
    handler: Arc<Handler>,
}

impl FnTransport {
    pub fn new<F>(handler: F) -> Self
    where
        F: Fn(&ModelRequest) -> Result<ModelResponse, TransportError> + Send + Sync + 'static,
    {
        Self {
            handler: Arc::new(handler),
        }
    }
}

impl Transport for FnTransport {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse, TransportError> {
        (self.handler)(request)
    }
}
