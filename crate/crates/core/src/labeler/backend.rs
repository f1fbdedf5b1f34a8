//! Text-completion backends: HTTP JSON, rule-based mock and scripted test double.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::labeler::prompt::{embedded_blocks, embedded_report};
use crate::labeler::rules::{default_blocks, rule_label_text};

/// Environment variable holding the bearer credential for HTTP backends.
pub const API_KEY_ENV: &str = "CXRLAB_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub decoding: Decoding,
    pub timeout: Duration,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected backend payload: {0}")]
    Payload(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

/// Offline stand-in for an LLM: applies the keyword labeler using the guidance
/// found in the prompt itself, so prompt revisions change its behaviour.
#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
}

impl MockBackend {
    pub fn new() -> Self {
        Self { id: "mock".into() }
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let text = embedded_report(&request.prompt).unwrap_or(&request.prompt);
        let mut blocks = embedded_blocks(&request.prompt);
        for (id, block) in default_blocks().iter() {
            let target = &mut blocks[id];
            let prompt_has_guidance = target.terms().next().is_some()
                || !target.positive_exemplars.is_empty()
                || !target.negative_exemplars.is_empty();
            if !prompt_has_guidance {
                target.core_terms = block.core_terms.clone();
                target.synonyms = block.synonyms.clone();
            }
        }
        let values = rule_label_text(&blocks, text);
        serde_json::to_string(&values).map_err(|e| BackendError::Payload(e.to_string()))
    }
}

type Script = VecDeque<Result<String, BackendError>>;

/// Test double replaying canned responses.
///
/// Responses are chosen per call: the first registered needle contained in the
/// prompt's report text selects its script, otherwise the default script is
/// used. The last response of a script repeats once the others are consumed.
/// When no script applies the fallback backend answers.
pub struct ScriptedBackend {
    id: String,
    default_script: Mutex<Script>,
    by_report: Mutex<Vec<(String, Script)>>,
    fallback: Option<Box<dyn Backend>>,
    calls: Mutex<HashMap<String, usize>>,
}

impl ScriptedBackend {
    pub fn new(responses: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        Self {
            id: "scripted".into(),
            default_script: Mutex::new(responses.into_iter().collect()),
            by_report: Mutex::new(Vec::new()),
            fallback: None,
            calls: Mutex::new(HashMap::new()),
        }
    }

    /// Every response is `Ok(text)`.
    pub fn replies<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| Ok(t.into())))
    }

    pub fn with_fallback(mut self, backend: impl Backend + 'static) -> Self {
        self.fallback = Some(Box::new(backend));
        self
    }

    pub fn for_report(
        self,
        needle: impl Into<String>,
        responses: impl IntoIterator<Item = Result<String, BackendError>>,
    ) -> Self {
        self.by_report
            .lock()
            .expect("script lock")
            .push((needle.into(), responses.into_iter().collect()));
        self
    }

    /// Number of calls whose report text contained `needle`.
    pub fn calls_for(&self, needle: &str) -> usize {
        self.calls.lock().expect("calls lock").get(needle).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().expect("calls lock").get("").copied().unwrap_or(0)
    }

    fn pop(script: &mut Script) -> Option<Result<String, BackendError>> {
        if script.len() > 1 {
            script.pop_front()
        } else {
            script.front().cloned()
        }
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let report = embedded_report(&request.prompt).unwrap_or(&request.prompt);
        {
            let mut calls = self.calls.lock().expect("calls lock");
            *calls.entry(String::new()).or_default() += 1;
            for (needle, _) in self.by_report.lock().expect("script lock").iter() {
                if report.contains(needle.as_str()) {
                    *calls.entry(needle.clone()).or_default() += 1;
                }
            }
        }
        let scripted = {
            let mut by_report = self.by_report.lock().expect("script lock");
            by_report
                .iter_mut()
                .find(|(needle, _)| report.contains(needle.as_str()))
                .and_then(|(_, script)| Self::pop(script))
        };
        if let Some(response) = scripted {
            return response;
        }
        if let Some(response) = Self::pop(&mut self.default_script.lock().expect("script lock")) {
            return response;
        }
        match &self.fallback {
            Some(backend) => backend.complete(request),
            None => Err(BackendError::Unavailable("script exhausted".into())),
        }
    }
}

/// OpenAI-compatible chat-completions adapter.
///
/// Request body: `{"model", "messages": [{"role": "user", "content": prompt}],
/// "temperature", "max_tokens"?, "seed"?}`; the reply text is read from
/// `choices[0].message.content`. The credential comes from the environment
/// and is never written to run artifacts.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let endpoint = endpoint.into();
        let model = model.into();
        Self {
            id: format!("http:{model}"),
            endpoint,
            model,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.decoding.temperature,
        });
        if let Some(max_tokens) = request.decoding.max_tokens {
            body["max_tokens"] = max_tokens.into();
        }
        if let Some(seed) = request.decoding.seed {
            body["seed"] = seed.into();
        }

        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(request.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut call = agent.post(&self.url());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(&body).map_err(|e| BackendError::Payload(e.to_string()))?;
        let mut response = call
            .header("Content-Type", "application/json")
            .send(&payload[..])
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let payload: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Payload(e.to_string()))?;
        payload["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Payload("missing choices[0].message.content".into()))
    }
}
