//! HTTP facade over cohorts, reader annotations, prompt lineage and
//! evaluation runs.
//!
//! All state lives under one root directory that uses the same layout as the
//! command-line tool: `prompts.json`, `runs/<run_id>/…`, `leaderboard.{csv,md}`
//! plus the service's own `session.jsonl` event log. Mutations are validated,
//! appended to the log, then applied; replaying the log rebuilds the session.
//!
//! Validation and benchmark runs answer `202 Accepted` with a poll URL
//! (`/jobs/{id}`); refinement loops are polled at `/loops/{id}`.

mod error;
pub mod session;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use cxrlab_core::corpus::{ingest, IngestOptions, ReportRecord};
use cxrlab_core::harness::{
    benchmark_generation, triage_queue, validate_labeler, EventLog, HarnessError, RunConfig, RunKind,
    RunStore, TriageCase, TriageResolution,
};
use cxrlab_core::labeler::{backend_from_config, Backend};
use cxrlab_core::reference::{build_reference, Vote, DEFAULT_QUORUM};
use cxrlab_core::taxonomy::resolve_label;
use cxrlab_core::{Corpus, LabelId, PerLabel, ReaderAnnotation, ReferenceStandard, Revision, LABEL_COUNT};

pub use error::ApiError;
pub use session::{LoopState, LoopStatus, SessionEvent, SessionState, PROMPTS_FILE, SESSION_LOG};

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub root: PathBuf,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub token: Option<String>,
    pub run_config: RunConfig,
    pub default_max_rounds: u32,
}

impl ServiceConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            token: None,
            run_config: RunConfig::default(),
            default_max_rounds: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub job_id: String,
    pub kind: RunKind,
    pub status: JobStatus,
    pub run_ids: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

struct Inner {
    config: ServiceConfig,
    store: RunStore,
    log: EventLog,
    session: RwLock<SessionState>,
    jobs: Mutex<BTreeMap<String, Job>>,
    next_id: AtomicU64,
    backend: Arc<dyn Backend>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Self, HarnessError> {
        let store = RunStore::open(&config.root)?;
        let (log, session) = session::open_log(&config.root)?;
        let backend: Arc<dyn Backend> = backend_from_config(&config.run_config.backend)?.into();
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                store,
                log,
                session: RwLock::new(session),
                jobs: Mutex::new(BTreeMap::new()),
                next_id: AtomicU64::new(1),
                backend,
            }),
        })
    }

    /// Snapshot of the live session.
    pub fn session(&self) -> SessionState {
        self.read().clone()
    }

    /// Session rebuilt from the event log alone.
    pub fn replay(&self) -> Result<SessionState, HarnessError> {
        SessionState::replay(&self.inner.log.read_all::<SessionEvent>()?)
    }

    pub fn store(&self) -> &RunStore {
        &self.inner.store
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, SessionState> {
        self.inner.session.read().expect("session lock")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, SessionState> {
        self.inner.session.write().expect("session lock")
    }

    /// Log then apply one already-validated event.
    fn commit(&self, session: &mut SessionState, event: SessionEvent) -> ApiResult<()> {
        self.inner.log.append(&event)?;
        session.apply(&event)?;
        if matches!(event, SessionEvent::PromptRefined { .. } | SessionEvent::PromptFrozen { .. }) {
            session.registry.save(&self.inner.config.root.join(PROMPTS_FILE))?;
        }
        Ok(())
    }

    fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.inner.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn set_job(&self, job: Job) {
        self.inner.jobs.lock().expect("jobs lock").insert(job.job_id.clone(), job);
    }

    fn run_config(&self) -> &RunConfig {
        &self.inner.config.run_config
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/cohorts", post(upload_cohort).get(list_cohorts))
        .route("/reports/{id}", get(get_report))
        .route("/annotations", post(submit_annotation))
        .route("/reference", get(get_reference))
        .route("/runs", get(list_runs))
        .route("/runs/validate", post(start_validation))
        .route("/runs/benchmark", post(start_benchmark))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/triage", get(get_triage))
        .route("/jobs/{id}", get(get_job))
        .route("/triage/{case}/resolve", post(resolve_case))
        .route("/prompts", get(list_prompts))
        .route("/prompts/{version}", get(get_prompt))
        .route("/prompts/{version}/refine", post(refine))
        .route("/prompts/{version}/freeze", post(freeze))
        .route("/loops", post(start_loop))
        .route("/loops/{id}", get(get_loop))
        .route("/loops/{id}/revisions", post(submit_loop_revisions))
        .route("/leaderboard", get(leaderboard))
        .layer(middleware::from_fn_with_state(state.clone(), authorize))
        .with_state(state)
}

/// Serve until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn authorize(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.inner.config.token {
        let expected = format!("Bearer {token}");
        let given = request.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

fn accepted(body: Value) -> Response {
    (StatusCode::ACCEPTED, Json(body)).into_response()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
struct CohortUpload {
    cohort: String,
    reports: Vec<ReportRecord>,
    #[serde(default)]
    require_sections: bool,
    #[serde(default = "default_true")]
    deidentify: bool,
}

async fn upload_cohort(State(state): State<AppState>, Json(body): Json<CohortUpload>) -> ApiResult<Response> {
    let name = body.cohort.trim().to_string();
    if name.is_empty() {
        return Err(ApiError::bad_request("MissingCohortName", "cohort name is empty"));
    }
    let options = IngestOptions {
        deidentify: body.deidentify,
        require_sections: body.require_sections,
        ..IngestOptions::default()
    };
    let (corpus, summary) = ingest(body.reports, &options)?;
    let mut session = state.write();
    if session.cohorts.contains_key(&name) {
        return Err(ApiError::bad_request("DuplicateCohort", format!("cohort {name:?} already exists")));
    }
    if let Some(id) = corpus.ids().find(|id| session.find_report(id).is_some()) {
        return Err(ApiError::bad_request("DuplicateReportId", format!("report {id:?} is already in another cohort")));
    }
    let event = SessionEvent::CohortUploaded {
        cohort: name.clone(),
        reports: corpus.reports().to_vec(),
    };
    state.commit(&mut session, event)?;
    Ok((StatusCode::CREATED, Json(json!({ "cohort": name, "summary": summary }))).into_response())
}

async fn list_cohorts(State(state): State<AppState>) -> Json<Value> {
    let session = state.read();
    let cohorts: Vec<Value> = session
        .cohorts
        .iter()
        .map(|(name, c)| json!({ "cohort": name, "n_reports": c.len() }))
        .collect();
    Json(json!({ "cohorts": cohorts }))
}

async fn get_report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.read();
    let (cohort, report) = session
        .find_report(&id)
        .ok_or_else(|| ApiError::not_found("UnknownReport", format!("no report {id:?}")))?;
    Ok(Json(json!({ "cohort": cohort, "report": report })))
}

/// Checks one submitted annotation object field by field so the error names
/// the violated rule.
fn parse_annotation(body: &Value) -> ApiResult<ReaderAnnotation> {
    let text = |key: &str, rule: &str| -> ApiResult<String> {
        body.get(key)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .ok_or_else(|| ApiError::bad_request(rule, format!("{key} must be a non-empty string")))
    };
    let reader_id = text("reader_id", "MissingReaderId")?;
    let report_id = text("report_id", "MissingReportId")?;
    let values = body
        .get("values")
        .and_then(Value::as_object)
        .ok_or_else(|| ApiError::bad_request("MissingLabel", "values must map every label to 1, 0 or -1"))?;
    let mut votes: [Option<Vote>; LABEL_COUNT] = [None; LABEL_COUNT];
    for (name, value) in values {
        let label = resolve_label(name).map_err(|e| ApiError::bad_request("UnknownLabel", e.to_string()))?;
        let vote = value
            .as_i64()
            .and_then(|v| Vote::try_from(v).ok())
            .ok_or_else(|| ApiError::bad_request("BadVote", format!("{name}: {value} is not 1, 0 or -1")))?;
        let slot = &mut votes[label.id.index()];
        if slot.is_some() {
            return Err(ApiError::bad_request("DuplicateLabel", format!("{} given twice", label.canonical_name)));
        }
        *slot = Some(vote);
    }
    let missing: Vec<&str> = LabelId::all().filter(|l| votes[l.index()].is_none()).map(|l| l.name()).collect();
    if !missing.is_empty() {
        return Err(ApiError::bad_request(
            "MissingLabel",
            format!("{} of {LABEL_COUNT} labels missing: {}", missing.len(), missing.join(", ")),
        ));
    }
    Ok(ReaderAnnotation {
        reader_id,
        report_id,
        values: PerLabel::from_fn(|l| votes[l.index()].expect("checked above")),
    })
}

async fn submit_annotation(State(state): State<AppState>, Json(body): Json<Value>) -> ApiResult<Response> {
    let annotation = parse_annotation(&body)?;
    let mut session = state.write();
    if session.find_report(&annotation.report_id).is_none() {
        return Err(ApiError::not_found("UnknownReport", format!("no report {:?}", annotation.report_id)));
    }
    if session
        .annotations
        .iter()
        .any(|a| a.reader_id == annotation.reader_id && a.report_id == annotation.report_id)
    {
        return Err(ApiError::bad_request(
            "DuplicateAnnotation",
            format!("{} already annotated {}", annotation.reader_id, annotation.report_id),
        ));
    }
    let ids = json!({ "reader_id": annotation.reader_id, "report_id": annotation.report_id });
    state.commit(&mut session, SessionEvent::AnnotationSubmitted { annotation })?;
    Ok((StatusCode::CREATED, Json(ids)).into_response())
}

fn cohort<'a>(session: &'a SessionState, name: &str) -> ApiResult<&'a Corpus> {
    session
        .cohorts
        .get(name)
        .ok_or_else(|| ApiError::not_found("UnknownCohort", format!("no cohort {name:?}")))
}

/// Reference for a cohort: an uploaded CSV if given, else the majority vote
/// over the cohort's annotations.
fn reference_for(session: &SessionState, name: &str, csv: Option<&str>, quorum: usize) -> ApiResult<ReferenceStandard> {
    match csv {
        Some(text) => Ok(ReferenceStandard::read_csv(text.as_bytes())?),
        None => {
            let corpus = cohort(session, name)?;
            Ok(build_reference(&session.cohort_annotations(corpus), quorum)?)
        }
    }
}

#[derive(Debug, Deserialize)]
struct ReferenceQuery {
    cohort: String,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    quorum: Option<usize>,
}

fn reference_json(reference: &ReferenceStandard) -> Value {
    let rows: Vec<Value> = reference
        .iter()
        .map(|(id, row)| {
            let mut obj = Map::new();
            obj.insert("report_id".into(), id.into());
            for label in LabelId::all() {
                obj.insert(label.name().into(), row[label.index()].code().into());
            }
            Value::Object(obj)
        })
        .collect();
    json!({ "quorum": reference.quorum(), "readers": reference.readers(), "rows": rows })
}

async fn get_reference(State(state): State<AppState>, Query(q): Query<ReferenceQuery>) -> ApiResult<Response> {
    let reference = {
        let session = state.read();
        reference_for(&session, &q.cohort, None, q.quorum.unwrap_or(DEFAULT_QUORUM))?
    };
    if q.format.as_deref() == Some("csv") {
        let mut out = Vec::new();
        reference.write_csv(&mut out)?;
        return Ok(([(header::CONTENT_TYPE, "text/csv")], out).into_response());
    }
    let mut body = reference_json(&reference);
    body["cohort"] = q.cohort.into();
    Ok(Json(body).into_response())
}

async fn list_runs(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(json!({ "runs": state.store().run_ids()? })))
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let run = state.store().load_run(&id)?;
    Ok(Json(serde_json::to_value(&run).map_err(HarnessError::from)?))
}

fn triage_with_resolutions(state: &AppState, run_id: &str) -> ApiResult<Vec<TriageCase>> {
    let mut cases = state.store().load_triage(run_id)?;
    let session = state.read();
    for case in &mut cases {
        if let Some(r) = session.resolutions.get(&case.case_id) {
            case.resolution = Some(r.clone());
        }
    }
    Ok(cases)
}

async fn get_triage(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<TriageCase>>> {
    Ok(Json(triage_with_resolutions(&state, &id)?))
}

async fn resolve_case(
    State(state): State<AppState>,
    Path(case_id): Path<String>,
    Json(resolution): Json<TriageResolution>,
) -> ApiResult<Json<TriageCase>> {
    let unknown = || ApiError::not_found("UnknownCase", format!("no triage case {case_id:?}"));
    let (run_id, _) = case_id.rsplit_once('.').ok_or_else(unknown)?;
    let mut case = state
        .store()
        .load_triage(run_id)
        .map_err(|_| unknown())?
        .into_iter()
        .find(|c| c.case_id == case_id)
        .ok_or_else(unknown)?;
    let mut session = state.write();
    session.registry.get(resolution.resolved_in_version)?;
    state.commit(
        &mut session,
        SessionEvent::TriageResolved {
            case_id: case_id.clone(),
            resolution: resolution.clone(),
        },
    )?;
    case.resolution = Some(resolution);
    Ok(Json(case))
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    state
        .inner
        .jobs
        .lock()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("UnknownJob", format!("no job {id:?}")))
}

#[derive(Debug, Deserialize)]
struct ValidateRequest {
    cohort: String,
    #[serde(default)]
    version: Option<u32>,
    /// Reference CSV text; defaults to the majority vote over annotations.
    #[serde(default)]
    reference_csv: Option<String>,
}

fn pick_version(session: &SessionState, version: Option<u32>) -> ApiResult<u32> {
    match version {
        Some(v) => Ok(session.registry.get(v)?.version_id),
        None => Ok(session.registry.latest().expect("registry has a root").version_id),
    }
}

/// Validate, store and index one run.
fn run_validation(
    state: &AppState,
    corpus: &Corpus,
    cohort_name: &str,
    version: u32,
    reference: &ReferenceStandard,
) -> ApiResult<(String, bool)> {
    let prompt = state.read().registry.get(version)?.clone();
    let run = validate_labeler(state.inner.backend.as_ref(), &prompt, corpus, cohort_name, reference, state.run_config())?;
    let triage = triage_queue(&run, corpus);
    state.store().write_run(&run, &triage)?;
    let mut session = state.write();
    state.commit(
        &mut session,
        SessionEvent::RunRecorded {
            run_id: run.run_id.clone(),
            kind: run.kind,
            cohort: cohort_name.to_string(),
        },
    )?;
    Ok((run.run_id.clone(), run.passed()))
}

fn spawn_job(state: &AppState, kind: RunKind, work: impl FnOnce(&AppState) -> ApiResult<Vec<String>> + Send + 'static) -> Response {
    let job_id = state.next_id("job-");
    state.set_job(Job {
        job_id: job_id.clone(),
        kind,
        status: JobStatus::Running,
        run_ids: Vec::new(),
        error: None,
    });
    let worker = state.clone();
    let id = job_id.clone();
    tokio::task::spawn_blocking(move || {
        let result = work(&worker);
        let (status, run_ids, error) = match result {
            Ok(ids) => (JobStatus::Completed, ids, None),
            Err(e) => {
                tracing::warn!(job = %id, error = %e.message, "job failed");
                (JobStatus::Failed, Vec::new(), Some(e))
            }
        };
        worker.set_job(Job { job_id: id, kind, status, run_ids, error });
    });
    accepted(json!({ "job_id": job_id, "poll": format!("/jobs/{job_id}") }))
}

async fn start_validation(State(state): State<AppState>, Json(body): Json<ValidateRequest>) -> ApiResult<Response> {
    let (corpus, version, reference) = {
        let session = state.read();
        let corpus = cohort(&session, &body.cohort)?.clone();
        let version = pick_version(&session, body.version)?;
        let reference = reference_for(&session, &body.cohort, body.reference_csv.as_deref(), DEFAULT_QUORUM)?;
        (corpus, version, reference)
    };
    let name = body.cohort;
    Ok(spawn_job(&state, RunKind::LabelerValidation, move |s| {
        Ok(vec![run_validation(s, &corpus, &name, version, &reference)?.0])
    }))
}

#[derive(Debug, Deserialize)]
struct ModelOutputs {
    model: String,
    reports: Vec<ReportRecord>,
}

#[derive(Debug, Deserialize)]
struct BenchmarkRequest {
    frozen_version: u32,
    reference_cohort: String,
    models: Vec<ModelOutputs>,
    #[serde(default)]
    cohort_tag: Option<String>,
}

async fn start_benchmark(State(state): State<AppState>, Json(body): Json<BenchmarkRequest>) -> ApiResult<Response> {
    if body.models.is_empty() {
        return Err(ApiError::bad_request("NoModels", "models must not be empty"));
    }
    let mut names = HashSet::new();
    if let Some(m) = body.models.iter().find(|m| !names.insert(m.model.as_str())) {
        return Err(ApiError::bad_request("DuplicateModel", format!("model {:?} listed twice", m.model)));
    }
    let (registry, reference) = {
        let session = state.read();
        session.registry.get(body.frozen_version)?;
        if !session.registry.is_frozen(body.frozen_version) {
            return Err(HarnessError::FrozenVersionViolation(format!(
                "version {} must be frozen before benchmarking",
                body.frozen_version
            ))
            .into());
        }
        (session.registry.clone(), cohort(&session, &body.reference_cohort)?.clone())
    };
    let mut outputs = Vec::new();
    for m in body.models {
        let (corpus, _) = ingest(m.reports, &IngestOptions::default())?;
        outputs.push((m.model, corpus));
    }
    let tag = body.cohort_tag.unwrap_or_else(|| body.reference_cohort.clone());
    let version = body.frozen_version;
    Ok(spawn_job(&state, RunKind::GenerationBenchmark, move |s| {
        let mut ids = Vec::new();
        for (model, corpus) in &outputs {
            let run = benchmark_generation(corpus, &reference, s.inner.backend.as_ref(), &registry, version, model, &tag, s.run_config())?;
            s.store().write_run(&run, &[])?;
            let mut session = s.write();
            s.commit(
                &mut session,
                SessionEvent::RunRecorded {
                    run_id: run.run_id.clone(),
                    kind: run.kind,
                    cohort: tag.clone(),
                },
            )?;
            ids.push(run.run_id);
        }
        s.store().write_leaderboard(&s.store().leaderboard()?)?;
        Ok(ids)
    }))
}

async fn list_prompts(State(state): State<AppState>) -> Json<Value> {
    let session = state.read();
    let versions: Vec<_> = session.registry.versions().collect();
    let frozen: Vec<u32> = session.registry.frozen().collect();
    Json(json!({ "versions": versions, "frozen": frozen }))
}

async fn get_prompt(State(state): State<AppState>, Path(version): Path<u32>) -> ApiResult<Json<Value>> {
    let session = state.read();
    let prompt = session.registry.get(version)?;
    Ok(Json(json!({
        "version": prompt,
        "frozen": session.registry.is_frozen(version),
        "lineage": session.registry.lineage(version)?,
    })))
}

#[derive(Debug, Deserialize)]
struct RefineRequest {
    revisions: Vec<Revision>,
}

fn lineage_root(session: &SessionState, version: u32) -> ApiResult<u32> {
    Ok(session.registry.lineage(version)?[0])
}

/// Validate a refinement against a scratch copy and return the new version id.
fn check_refine(session: &SessionState, parent: u32, revisions: &[Revision]) -> ApiResult<u32> {
    let mut scratch = session.registry.clone();
    Ok(scratch.refine(parent, revisions)?.version_id)
}

async fn refine(
    State(state): State<AppState>,
    Path(version): Path<u32>,
    Json(body): Json<RefineRequest>,
) -> ApiResult<Response> {
    let mut session = state.write();
    let root = lineage_root(&session, version)?;
    if let Some(active) = session.active_loop(root) {
        return Err(ApiError::conflict(
            "LoopConflict",
            format!("loop {} is refining this lineage; submit revisions to it", active.loop_id),
        ));
    }
    let version_id = check_refine(&session, version, &body.revisions)?;
    state.commit(
        &mut session,
        SessionEvent::PromptRefined {
            parent: version,
            revisions: body.revisions,
            version_id,
        },
    )?;
    let created = session.registry.get(version_id)?.clone();
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn freeze(State(state): State<AppState>, Path(version): Path<u32>) -> ApiResult<Json<Value>> {
    let mut session = state.write();
    session.registry.get(version)?;
    if !session.registry.is_frozen(version) {
        state.commit(&mut session, SessionEvent::PromptFrozen { version })?;
    }
    Ok(Json(json!({ "version": version, "frozen": true })))
}

#[derive(Debug, Deserialize)]
struct LoopRequest {
    cohort: String,
    #[serde(default)]
    version: Option<u32>,
    #[serde(default)]
    max_rounds: Option<u32>,
    #[serde(default)]
    reference_csv: Option<String>,
}

/// Validate the loop's current version and record the round.
fn loop_round(state: &AppState, loop_id: &str, reference_csv: Option<&str>) -> ApiResult<Vec<String>> {
    let (corpus, cohort_name, version, reference) = {
        let session = state.read();
        let l = &session.loops[loop_id];
        let corpus = cohort(&session, &l.cohort)?.clone();
        let reference = reference_for(&session, &l.cohort, reference_csv, DEFAULT_QUORUM)?;
        (corpus, l.cohort.clone(), l.current_version, reference)
    };
    let outcome = run_validation(state, &corpus, &cohort_name, version, &reference);
    let mut session = state.write();
    match outcome {
        Ok((run_id, passed)) => {
            let event = SessionEvent::LoopRoundCompleted {
                loop_id: loop_id.to_string(),
                run_id: run_id.clone(),
                passed,
            };
            state.commit(&mut session, event)?;
            Ok(vec![run_id])
        }
        Err(e) => {
            let event = SessionEvent::LoopFailed {
                loop_id: loop_id.to_string(),
                error: e.message.clone(),
            };
            state.commit(&mut session, event)?;
            Err(e)
        }
    }
}

fn spawn_round(state: &AppState, loop_id: String, reference_csv: Option<String>) -> Response {
    let worker = state.clone();
    let id = loop_id.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = loop_round(&worker, &id, reference_csv.as_deref()) {
            tracing::warn!(loop_id = %id, error = %e.message, "loop round failed");
        }
    });
    accepted(json!({ "loop_id": loop_id, "poll": format!("/loops/{loop_id}") }))
}

async fn start_loop(State(state): State<AppState>, Json(body): Json<LoopRequest>) -> ApiResult<Response> {
    let max_rounds = body.max_rounds.unwrap_or(state.inner.config.default_max_rounds);
    if max_rounds == 0 {
        return Err(ApiError::bad_request("InvalidArgument", "max_rounds must be at least 1"));
    }
    let loop_id = state.next_id("loop-");
    {
        let mut session = state.write();
        cohort(&session, &body.cohort)?;
        reference_for(&session, &body.cohort, body.reference_csv.as_deref(), DEFAULT_QUORUM)?;
        let version = pick_version(&session, body.version)?;
        let root = lineage_root(&session, version)?;
        if let Some(active) = session.active_loop(root) {
            return Err(ApiError::conflict(
                "LoopConflict",
                format!("loop {} is already active on this lineage", active.loop_id),
            ));
        }
        let event = SessionEvent::LoopStarted {
            loop_id: loop_id.clone(),
            cohort: body.cohort.clone(),
            lineage_root: root,
            version,
            max_rounds,
        };
        state.commit(&mut session, event)?;
    }
    Ok(spawn_round(&state, loop_id, body.reference_csv))
}

async fn get_loop(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<LoopState>> {
    state
        .read()
        .loops
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("UnknownLoop", format!("no loop {id:?}")))
}

#[derive(Debug, Deserialize)]
struct LoopRevisionRequest {
    revisions: Vec<Revision>,
    #[serde(default)]
    reference_csv: Option<String>,
}

async fn submit_loop_revisions(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<LoopRevisionRequest>,
) -> ApiResult<Response> {
    {
        let mut session = state.write();
        let l = session
            .loops
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("UnknownLoop", format!("no loop {id:?}")))?;
        if l.status != LoopStatus::AwaitingRevisions {
            return Err(ApiError::conflict(
                "LoopConflict",
                format!("loop {id} is not awaiting revisions (status {:?})", l.status),
            ));
        }
        let version_id = check_refine(&session, l.current_version, &body.revisions)?;
        state.commit(
            &mut session,
            SessionEvent::PromptRefined {
                parent: l.current_version,
                revisions: body.revisions,
                version_id,
            },
        )?;
        state.commit(&mut session, SessionEvent::LoopRevised { loop_id: id.clone(), version: version_id })?;
    }
    Ok(spawn_round(&state, id, body.reference_csv))
}

#[derive(Debug, Deserialize)]
struct LeaderboardQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn leaderboard(State(state): State<AppState>, Query(q): Query<LeaderboardQuery>) -> ApiResult<Response> {
    let board = state.store().leaderboard()?;
    Ok(match q.format.as_deref() {
        Some("csv") => ([(header::CONTENT_TYPE, "text/csv")], board.to_csv()).into_response(),
        Some("md") => ([(header::CONTENT_TYPE, "text/markdown")], board.to_markdown()).into_response(),
        _ => Json(board).into_response(),
    })
}
