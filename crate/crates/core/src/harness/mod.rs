//! Evaluation runs: labeler validation against a reference, gating, error
//! triage, prompt lineage and generated-report benchmarking.

mod optimize;
mod prompts;
pub mod store;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optimize::{optimization_loop, LoopOutcome, NoRevisions, RevisionSource, ScriptedRevisions};
pub use prompts::{refine_prompt, Polarity, PromptRegistry, Revision, RevisionKind};
pub use store::{EventLog, RunEvent, RunStore};

use crate::corpus::Corpus;
use crate::labeler::{
    label_corpus, rules::matching_sentence, Backend, BackendConfig, LabelError, LabelFailure,
    LabelMatrix, MatrixError, PromptVersion,
};
use crate::metrics::{
    check_same_reports, metric_report_with_alpha, paired_test, ran_score, MetricError, MetricReport,
    PairedTest, DEFAULT_ALPHA,
};
use crate::reference::{ReferenceError, ReferenceStandard, ReferenceState};
use crate::taxonomy::LabelId;

/// Characters kept when no keyword sentence is found.
pub const EXCERPT_CHARS: usize = 240;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("reference has no row for cohort report {0:?}")]
    ReferenceMissingReport(String),
    #[error("{failed} of {total} reports failed to label (limit {limit:.2})")]
    TooManyFailures { failed: usize, total: usize, limit: f64 },
    #[error("empty revision: {0}")]
    EmptyRevision(String),
    #[error("unknown prompt version {0}")]
    UnknownVersion(u32),
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("frozen version violation: {0}")]
    FrozenVersionViolation(String),
    #[error("runs were scored on different cohorts: {0}")]
    CohortMismatch(String),
    #[error("gate still failing after {rounds} rounds")]
    MaxRoundsExceeded { rounds: u32, outcome: Box<LoopOutcome> },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunKind {
    LabelerValidation,
    GenerationBenchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateThresholds {
    pub accuracy: f64,
    pub kappa: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            accuracy: 0.90,
            kappa: 0.90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGate {
    pub label: LabelId,
    pub accuracy: Option<f64>,
    pub kappa_vs_reference: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub thresholds: GateThresholds,
    pub per_label: Vec<LabelGate>,
    pub all_passed: bool,
}

impl GateResult {
    pub fn passed_count(&self) -> usize {
        self.per_label.iter().filter(|g| g.passed).count()
    }

    pub fn failing(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.per_label.iter().filter(|g| !g.passed).map(|g| g.label)
    }
}

/// A label passes when both accuracy and kappa reach their thresholds.
/// Labels without a single resolved cell cannot pass.
pub fn evaluate_gate(report: &MetricReport, thresholds: GateThresholds) -> GateResult {
    let per_label: Vec<LabelGate> = report
        .per_label
        .iter()
        .map(|m| {
            let accuracy = m.accuracy.map(|a| a.point);
            let passed = matches!(
                (accuracy, m.kappa),
                (Some(a), Some(k)) if a >= thresholds.accuracy && k >= thresholds.kappa
            );
            LabelGate {
                label: m.label,
                accuracy,
                kappa_vs_reference: m.kappa,
                passed,
            }
        })
        .collect();
    let all_passed = per_label.iter().all(|g| g.passed);
    GateResult {
        thresholds,
        per_label,
        all_passed,
    }
}

/// Settings echoed into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub thresholds: GateThresholds,
    /// Runs with a larger share of unlabeled reports are rejected.
    pub max_failure_fraction: f64,
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            thresholds: GateThresholds::default(),
            max_failure_fraction: 0.05,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// The reproducible part of a run, stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: RunKind,
    pub prompt_version: u32,
    pub prompt: PromptVersion,
    pub backend_id: String,
    pub cohort_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub config: RunConfig,
    pub n_reports: usize,
    pub failures: Vec<LabelFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRun {
    pub run_id: String,
    pub kind: RunKind,
    pub prompt_version: u32,
    #[serde(skip)]
    pub prompt: Option<PromptVersion>,
    pub backend_id: String,
    pub cohort_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub created_at: Option<chrono::DateTime<chrono::Utc>>,
    pub config: RunConfig,
    pub n_reports: usize,
    pub failures: Vec<LabelFailure>,
    pub metric_report: MetricReport,
    pub gate_result: Option<GateResult>,
    #[serde(skip)]
    pub predictions: LabelMatrix,
    #[serde(skip)]
    pub reference: ReferenceStandard,
}

impl EvaluationRun {
    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            run_id: self.run_id.clone(),
            kind: self.kind,
            prompt_version: self.prompt_version,
            prompt: self.prompt.clone().expect("completed runs carry their prompt"),
            backend_id: self.backend_id.clone(),
            cohort_tag: self.cohort_tag.clone(),
            model: self.model.clone(),
            config: self.config.clone(),
            n_reports: self.n_reports,
            failures: self.failures.clone(),
        }
    }

    pub fn from_parts(
        m: RunManifest,
        created_at: Option<chrono::DateTime<chrono::Utc>>,
        predictions: LabelMatrix,
        reference: ReferenceStandard,
        metric_report: MetricReport,
        gate_result: Option<GateResult>,
    ) -> Self {
        Self {
            run_id: m.run_id,
            kind: m.kind,
            prompt_version: m.prompt_version,
            prompt: Some(m.prompt),
            backend_id: m.backend_id,
            cohort_tag: m.cohort_tag,
            model: m.model,
            created_at,
            config: m.config,
            n_reports: m.n_reports,
            failures: m.failures,
            metric_report,
            gate_result,
            predictions,
            reference,
        }
    }

    pub fn passed(&self) -> bool {
        self.gate_result.as_ref().is_some_and(|g| g.all_passed)
    }
}

/// Content address of a run: identical inputs give the same id.
#[allow(clippy::too_many_arguments)]
fn run_id(
    kind: RunKind,
    version: &PromptVersion,
    backend_id: &str,
    config: &RunConfig,
    cohort_tag: &str,
    model: Option<&str>,
    corpora: &[&Corpus],
    reference: &ReferenceStandard,
) -> Result<String, HarnessError> {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(serde_json::to_string(&kind)?.as_bytes());
    field(serde_json::to_string(version)?.as_bytes());
    field(backend_id.as_bytes());
    field(serde_json::to_string(config)?.as_bytes());
    field(cohort_tag.as_bytes());
    field(model.unwrap_or("").as_bytes());
    for corpus in corpora {
        for r in corpus.reports() {
            field(r.report_id.as_bytes());
            field(r.raw_text.as_bytes());
        }
    }
    let mut csv = Vec::new();
    reference.write_csv(&mut csv)?;
    field(&csv);
    let digest = hasher.finalize();
    Ok(hex::encode(&digest[..8]))
}

fn check_failures(failed: usize, total: usize, limit: f64) -> Result<(), HarnessError> {
    if total > 0 && failed as f64 / total as f64 > limit {
        return Err(HarnessError::TooManyFailures { failed, total, limit });
    }
    Ok(())
}

/// Label `cohort` and score it against the resolved cells of `reference`.
///
/// Reports that fail to label are recorded on the run and left out of the
/// metrics, unless their share exceeds `config.max_failure_fraction`.
pub fn validate_labeler(
    backend: &dyn Backend,
    version: &PromptVersion,
    cohort: &Corpus,
    cohort_tag: &str,
    reference: &ReferenceStandard,
    config: &RunConfig,
) -> Result<EvaluationRun, HarnessError> {
    if let Some(r) = cohort.reports().iter().find(|r| !reference.contains(&r.report_id)) {
        return Err(HarnessError::ReferenceMissingReport(r.report_id.clone()));
    }
    let scoped = reference.restrict(cohort.reports().iter().map(|r| r.report_id.as_str()));
    let outcome = label_corpus(backend, version, cohort, &config.backend)?;
    check_failures(outcome.failures.len(), cohort.len(), config.max_failure_fraction)?;

    let scored = scoped.restrict(outcome.matrix.report_ids().iter().map(String::as_str));
    let metric_report = metric_report_with_alpha(&outcome.matrix, &scored, config.alpha)?;
    let gate = evaluate_gate(&metric_report, config.thresholds);
    let run_id = run_id(
        RunKind::LabelerValidation,
        version,
        backend.id(),
        config,
        cohort_tag,
        None,
        &[cohort],
        &scoped,
    )?;
    tracing::info!(%run_id, version = version.version_id, passed = gate.all_passed, "validation run complete");
    Ok(EvaluationRun {
        run_id,
        kind: RunKind::LabelerValidation,
        prompt_version: version.version_id,
        prompt: Some(version.clone()),
        backend_id: backend.id().to_string(),
        cohort_tag: cohort_tag.to_string(),
        model: None,
        created_at: Some(chrono::Utc::now()),
        config: config.clone(),
        n_reports: cohort.len(),
        failures: outcome.failures,
        metric_report,
        gate_result: Some(gate),
        predictions: outcome.matrix,
        reference: scored,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageResolution {
    pub revision_kind: RevisionKind,
    pub note: String,
    pub resolved_in_version: u32,
}

/// One mismatched resolved cell of a validation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageCase {
    pub case_id: String,
    pub run_id: String,
    pub report_id: String,
    pub label: LabelId,
    pub predicted: u8,
    pub reference: ReferenceState,
    pub report_text_excerpt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<TriageResolution>,
}

fn excerpt(run: &EvaluationRun, label: LabelId, text: &str) -> String {
    let blocks = run
        .prompt
        .as_ref()
        .map(|p| &p.per_label_blocks)
        .unwrap_or_else(|| crate::labeler::rules::default_blocks());
    match matching_sentence(blocks, label, text) {
        Some(sentence) => sentence.to_string(),
        None => text.chars().take(EXCERPT_CHARS).collect(),
    }
}

/// Every cell where prediction and resolved reference disagree, ordered by
/// label then report id.
pub fn triage_queue(run: &EvaluationRun, corpus: &Corpus) -> Vec<TriageCase> {
    let mut cells: Vec<(LabelId, &str, bool, ReferenceState)> = Vec::new();
    for label in LabelId::all() {
        for (report_id, actual) in run.reference.resolved(label) {
            let Some(values) = run.predictions.get(report_id) else { continue };
            if values.get(label) != actual {
                let state = if actual { ReferenceState::Positive } else { ReferenceState::Negative };
                cells.push((label, report_id, values.get(label), state));
            }
        }
    }
    cells.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    cells
        .into_iter()
        .enumerate()
        .map(|(i, (label, report_id, predicted, reference))| TriageCase {
            case_id: format!("{}.{}", run.run_id, i),
            run_id: run.run_id.clone(),
            report_id: report_id.to_string(),
            label,
            predicted: predicted as u8,
            reference,
            report_text_excerpt: corpus
                .get(report_id)
                .map(|r| excerpt(run, label, &r.raw_text))
                .unwrap_or_default(),
            resolution: None,
        })
        .collect()
}

/// Score generated reports against their reference reports with a frozen labeler.
#[allow(clippy::too_many_arguments)]
pub fn benchmark_generation(
    model_outputs: &Corpus,
    reference_reports: &Corpus,
    backend: &dyn Backend,
    registry: &PromptRegistry,
    version_id: u32,
    model: &str,
    cohort_tag: &str,
    config: &RunConfig,
) -> Result<EvaluationRun, HarnessError> {
    let version = registry.get(version_id)?;
    if !registry.is_frozen(version_id) {
        return Err(HarnessError::FrozenVersionViolation(format!(
            "version {version_id} must be frozen before benchmarking"
        )));
    }
    let ids = |c: &Corpus| {
        let mut m = LabelMatrix::new();
        for r in c.reports() {
            let _ = m.insert(r.report_id.clone(), Default::default());
        }
        m
    };
    check_same_reports(&ids(model_outputs), &ids(reference_reports))?;

    let generated = label_corpus(backend, version, model_outputs, &config.backend)?;
    let original = label_corpus(backend, version, reference_reports, &config.backend)?;
    let mut failures = generated.failures;
    failures.extend(original.failures);
    let failed: std::collections::BTreeSet<&str> = failures.iter().map(|f| f.report_id.as_str()).collect();
    check_failures(failed.len(), model_outputs.len(), config.max_failure_fraction)?;

    let keep: Vec<&str> = reference_reports
        .reports()
        .iter()
        .map(|r| r.report_id.as_str())
        .filter(|id| !failed.contains(id))
        .collect();
    let gen_labels = generated.matrix.restrict(keep.iter().copied());
    let ref_labels = original.matrix.restrict(keep.iter().copied());
    let (score, metric_report) = ran_score(&gen_labels, &ref_labels)?;
    let reference = ReferenceStandard::from_binary(&ref_labels);
    let run_id = run_id(
        RunKind::GenerationBenchmark,
        version,
        backend.id(),
        config,
        cohort_tag,
        Some(model),
        &[model_outputs, reference_reports],
        &reference,
    )?;
    tracing::info!(%run_id, model, ran_score = score, "benchmark run complete");
    Ok(EvaluationRun {
        run_id,
        kind: RunKind::GenerationBenchmark,
        prompt_version: version_id,
        prompt: Some(version.clone()),
        backend_id: backend.id().to_string(),
        cohort_tag: cohort_tag.to_string(),
        model: Some(model.to_string()),
        created_at: Some(chrono::Utc::now()),
        config: config.clone(),
        n_reports: model_outputs.len(),
        failures,
        metric_report,
        gate_result: None,
        predictions: gen_labels,
        reference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDelta {
    pub label: LabelId,
    pub f1_a: f64,
    pub f1_b: f64,
    /// `f1_b - f1_a`
    pub delta_f1: f64,
    pub test: PairedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub run_a: String,
    pub run_b: String,
    pub per_label: Vec<LabelDelta>,
    pub macro_delta_f1: f64,
}

/// Per-label F1 change from `a` to `b` with exact McNemar p-values.
pub fn compare_runs(a: &EvaluationRun, b: &EvaluationRun) -> Result<RunComparison, HarnessError> {
    if !a.reference.iter().eq(b.reference.iter()) {
        let detail = if a.reference.report_ids() != b.reference.report_ids() {
            format!("{} vs {} scored reports", a.reference.len(), b.reference.len())
        } else {
            "reference cells differ".to_string()
        };
        return Err(HarnessError::CohortMismatch(detail));
    }
    let mut per_label = Vec::new();
    for label in LabelId::all() {
        let (f1_a, f1_b) = (a.metric_report.label(label).scores.f1, b.metric_report.label(label).scores.f1);
        per_label.push(LabelDelta {
            label,
            f1_a,
            f1_b,
            delta_f1: f1_b - f1_a,
            test: paired_test(&a.predictions, &b.predictions, &a.reference, label)?,
        });
    }
    Ok(RunComparison {
        run_a: a.run_id.clone(),
        run_b: b.run_id.clone(),
        per_label,
        macro_delta_f1: b.metric_report.macro_avg.f1 - a.metric_report.macro_avg.f1,
    })
}

#[cfg(test)]
mod tests;
