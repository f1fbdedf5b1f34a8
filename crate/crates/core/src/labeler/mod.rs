//! Prompt-driven report labeling.
//!
//! A [`PromptVersion`] is rendered against each report, sent to a [`Backend`],
//! and the reply parsed into strict-binary [`LabelValues`]. Malformed replies
//! are re-requested with a fixed format reminder up to `max_retries` times.

mod backend;
mod matrix;
mod prompt;
mod response;
pub mod rules;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use backend::{
    Backend, BackendError, CompletionRequest, Decoding, HttpBackend, MockBackend, ScriptedBackend,
    API_KEY_ENV,
};
pub use matrix::{LabelMatrix, LabelValues, LabelVector, MatrixError};
pub(crate) use matrix::label_columns;
pub use prompt::{
    embedded_blocks, embedded_report, keyword_table, render_prompt, render_prompt_with,
    report_text, KeywordEntry, LabelBlock, PromptVersion, ReportView, DEFAULT_PREAMBLE,
};
pub use response::{parse_label_response, ResponseError};
pub use rules::{rule_label, rule_label_text};

use crate::corpus::{Corpus, Report};

/// Appended to the prompt when a reply could not be parsed.
pub const FORMAT_REMINDER: &str = "\n\nYour previous reply could not be used. Respond with exactly one \
JSON object containing every label listed above as a key with the value 0 or 1, and no other text.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// `mock` or `http`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub max_retries: u32,
    #[serde(with = "millis_list")]
    pub backoff: Vec<Duration>,
    pub max_parallel: usize,
    #[serde(with = "millis")]
    pub timeout: Duration,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub view: ReportView,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: "mock".into(),
            endpoint: None,
            model: None,
            max_retries: 2,
            backoff: Vec::new(),
            max_parallel: 4,
            timeout: Duration::from_secs(120),
            decoding: Decoding::default(),
            view: ReportView::FullText,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        if self.max_parallel == 0 {
            return Err(LabelError::InvalidConfig("max_parallel must be at least 1".into()));
        }
        Ok(())
    }

    fn backoff_for(&self, retry: usize) -> Duration {
        self.backoff
            .get(retry)
            .or_else(|| self.backoff.last())
            .copied()
            .unwrap_or_default()
    }
}

/// Instantiate the backend named by `config.kind`. HTTP backends read their
/// credential from [`API_KEY_ENV`].
pub fn backend_from_config(config: &BackendConfig) -> Result<Box<dyn Backend>, LabelError> {
    match config.kind.as_str() {
        "mock" => Ok(Box::new(MockBackend::new())),
        "http" => {
            let endpoint = config
                .endpoint
                .as_deref()
                .ok_or_else(|| LabelError::InvalidConfig("http backend needs an endpoint".into()))?;
            let model = config
                .model
                .as_deref()
                .ok_or_else(|| LabelError::InvalidConfig("http backend needs a model".into()))?;
            Ok(Box::new(HttpBackend::new(endpoint, model)))
        }
        other => Err(LabelError::InvalidConfig(format!("unknown backend {other:?}"))),
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

mod millis_list {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &[Duration], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(d.iter().map(|d| d.as_millis() as u64))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Duration>, D::Error> {
        Ok(Vec::<u64>::deserialize(d)?
            .into_iter()
            .map(Duration::from_millis)
            .collect())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("backend unavailable after {attempts} attempts: {source}")]
    BackendUnavailable { attempts: u32, source: BackendError },
    #[error("no usable response after {attempts} attempts: {last_error}")]
    ExhaustedRetries {
        attempts: u32,
        last_error: ResponseError,
        last_raw: String,
    },
    #[error("invalid labeler configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeled {
    pub vector: LabelVector,
    /// Requests beyond the first.
    pub retries: u32,
}

/// Render, request and parse one report, retrying malformed or failed calls.
pub fn label_report(
    backend: &dyn Backend,
    version: &PromptVersion,
    report: &Report,
    config: &BackendConfig,
) -> Result<Labeled, LabelError> {
    let base = render_prompt_with(version, report, config.view);
    let attempts = config.max_retries + 1;
    let mut last_failure: Option<LabelError> = None;
    for attempt in 0..attempts {
        if attempt > 0 {
            let pause = config.backoff_for(attempt as usize - 1);
            if !pause.is_zero() {
                std::thread::sleep(pause);
            }
        }
        let prompt = match &last_failure {
            Some(LabelError::ExhaustedRetries { .. }) => format!("{base}{FORMAT_REMINDER}"),
            _ => base.clone(),
        };
        let request = CompletionRequest {
            prompt,
            decoding: config.decoding.clone(),
            timeout: config.timeout,
        };
        match backend.complete(&request) {
            Ok(raw) => match parse_label_response(&raw) {
                Ok(values) => {
                    return Ok(Labeled {
                        vector: LabelVector {
                            report_id: report.report_id.clone(),
                            values,
                            prompt_version: version.version_id,
                            backend_id: backend.id().to_string(),
                        },
                        retries: attempt,
                    })
                }
                Err(err) => {
                    tracing::debug!(report = %report.report_id, attempt, %err, "unusable response");
                    last_failure = Some(LabelError::ExhaustedRetries {
                        attempts: attempt + 1,
                        last_error: err,
                        last_raw: raw,
                    });
                }
            },
            Err(err) => {
                tracing::debug!(report = %report.report_id, attempt, %err, "backend call failed");
                last_failure = Some(LabelError::BackendUnavailable {
                    attempts: attempt + 1,
                    source: err,
                });
            }
        }
    }
    Err(last_failure.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub report_id: String,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_raw: Option<String>,
    pub backend_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelingOutcome {
    pub matrix: LabelMatrix,
    pub failures: Vec<LabelFailure>,
    pub total_retries: u32,
}

/// Label every report with at most `config.max_parallel` requests in flight.
/// Rows follow corpus order regardless of completion order.
pub fn label_corpus(
    backend: &dyn Backend,
    version: &PromptVersion,
    corpus: &Corpus,
    config: &BackendConfig,
) -> Result<LabelingOutcome, LabelError> {
    config.validate()?;
    let reports = corpus.reports();
    let results: Mutex<Vec<Option<Result<Labeled, LabelError>>>> =
        Mutex::new((0..reports.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = config.max_parallel.min(reports.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(report) = reports.get(i) else { break };
                let result = label_report(backend, version, report, config);
                results.lock().expect("result slots")[i] = Some(result);
            });
        }
    });

    let mut outcome = LabelingOutcome::default();
    for (report, result) in reports.iter().zip(results.into_inner().expect("result slots")) {
        match result.expect("every slot filled") {
            Ok(labeled) => {
                outcome.total_retries += labeled.retries;
                outcome
                    .matrix
                    .insert(report.report_id.clone(), labeled.vector.values)
                    .expect("corpus ids are unique");
            }
            Err(err) => {
                let (last_raw, backend_failure) = match &err {
                    LabelError::ExhaustedRetries { last_raw, .. } => (Some(last_raw.clone()), false),
                    _ => (None, true),
                };
                outcome.failures.push(LabelFailure {
                    report_id: report.report_id.clone(),
                    error: err.to_string(),
                    last_raw,
                    backend_failure,
                });
            }
        }
    }
    Ok(outcome)
}
