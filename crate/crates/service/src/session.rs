//! Authoritative session state and the event log it is rebuilt from.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use cxrlab_core::corpus::Report;
use cxrlab_core::harness::{EventLog, HarnessError, RunKind, TriageResolution};
use cxrlab_core::{Corpus, PromptRegistry, ReaderAnnotation, Revision};

pub const SESSION_LOG: &str = "session.jsonl";
pub const PROMPTS_FILE: &str = "prompts.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Running,
    AwaitingRevisions,
    Passed,
    Exhausted,
    Failed,
}

impl LoopStatus {
    pub fn is_active(self) -> bool {
        matches!(self, Self::Running | Self::AwaitingRevisions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub loop_id: String,
    pub cohort: String,
    /// First version of the lineage this loop refines.
    pub lineage_root: u32,
    pub current_version: u32,
    pub max_rounds: u32,
    pub rounds: u32,
    pub runs: Vec<String>,
    pub status: LoopStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Every mutation of [`SessionState`], as written to the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    CohortUploaded { cohort: String, reports: Vec<Report> },
    AnnotationSubmitted { annotation: ReaderAnnotation },
    PromptsImported { registry: PromptRegistry },
    PromptRefined { parent: u32, revisions: Vec<Revision>, version_id: u32 },
    PromptFrozen { version: u32 },
    RunRecorded { run_id: String, kind: RunKind, cohort: String },
    TriageResolved { case_id: String, resolution: TriageResolution },
    LoopStarted { loop_id: String, cohort: String, lineage_root: u32, version: u32, max_rounds: u32 },
    LoopRoundCompleted { loop_id: String, run_id: String, passed: bool },
    LoopRevised { loop_id: String, version: u32 },
    LoopFailed { loop_id: String, error: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionState {
    pub cohorts: BTreeMap<String, Corpus>,
    pub readers: BTreeSet<String>,
    pub annotations: Vec<ReaderAnnotation>,
    pub registry: PromptRegistry,
    /// Run ids in completion order, with the cohort each was scored on.
    pub runs: Vec<(String, RunKind, String)>,
    pub resolutions: BTreeMap<String, TriageResolution>,
    pub loops: BTreeMap<String, LoopState>,
}

impl SessionState {
    pub fn new() -> Self {
        Self {
            registry: PromptRegistry::with_root(),
            ..Self::default()
        }
    }

    /// Apply one event. Events are validated before they are logged, so a
    /// failure here means the log was edited by hand.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), HarnessError> {
        match event {
            SessionEvent::CohortUploaded { cohort, reports } => {
                let corpus = Corpus::from_reports(reports.clone())
                    .map_err(|e| HarnessError::InvalidArgument(e.to_string()))?;
                self.cohorts.insert(cohort.clone(), corpus);
            }
            SessionEvent::AnnotationSubmitted { annotation } => {
                self.readers.insert(annotation.reader_id.clone());
                self.annotations.push(annotation.clone());
            }
            SessionEvent::PromptsImported { registry } => self.registry = registry.clone(),
            SessionEvent::PromptRefined { parent, revisions, version_id } => {
                let got = self.registry.refine(*parent, revisions)?.version_id;
                if got != *version_id {
                    return Err(HarnessError::InvalidArgument(format!(
                        "replayed refinement produced version {got}, log says {version_id}"
                    )));
                }
            }
            SessionEvent::PromptFrozen { version } => self.registry.freeze(*version)?,
            SessionEvent::RunRecorded { run_id, kind, cohort } => {
                if !self.runs.iter().any(|r| &r.0 == run_id) {
                    self.runs.push((run_id.clone(), *kind, cohort.clone()));
                }
            }
            SessionEvent::TriageResolved { case_id, resolution } => {
                self.resolutions.insert(case_id.clone(), resolution.clone());
            }
            SessionEvent::LoopStarted { loop_id, cohort, lineage_root, version, max_rounds } => {
                self.loops.insert(
                    loop_id.clone(),
                    LoopState {
                        loop_id: loop_id.clone(),
                        cohort: cohort.clone(),
                        lineage_root: *lineage_root,
                        current_version: *version,
                        max_rounds: *max_rounds,
                        rounds: 0,
                        runs: Vec::new(),
                        status: LoopStatus::Running,
                        error: None,
                    },
                );
            }
            SessionEvent::LoopRoundCompleted { loop_id, run_id, passed } => {
                let state = self.loop_mut(loop_id)?;
                state.rounds += 1;
                state.runs.push(run_id.clone());
                state.status = if *passed {
                    LoopStatus::Passed
                } else if state.rounds >= state.max_rounds {
                    LoopStatus::Exhausted
                } else {
                    LoopStatus::AwaitingRevisions
                };
            }
            SessionEvent::LoopRevised { loop_id, version } => {
                let state = self.loop_mut(loop_id)?;
                state.current_version = *version;
                state.status = LoopStatus::Running;
            }
            SessionEvent::LoopFailed { loop_id, error } => {
                let state = self.loop_mut(loop_id)?;
                state.status = LoopStatus::Failed;
                state.error = Some(error.clone());
            }
        }
        Ok(())
    }

    fn loop_mut(&mut self, id: &str) -> Result<&mut LoopState, HarnessError> {
        self.loops
            .get_mut(id)
            .ok_or_else(|| HarnessError::InvalidArgument(format!("unknown loop {id:?}")))
    }

    pub fn replay(events: &[SessionEvent]) -> Result<Self, HarnessError> {
        let mut state = Self::new();
        for event in events {
            state.apply(event)?;
        }
        Ok(state)
    }

    pub fn find_report(&self, report_id: &str) -> Option<(&str, &Report)> {
        self.cohorts
            .iter()
            .find_map(|(name, c)| c.get(report_id).map(|r| (name.as_str(), r)))
    }

    /// Annotations on reports of one cohort, in submission order.
    pub fn cohort_annotations(&self, cohort: &Corpus) -> Vec<ReaderAnnotation> {
        self.annotations
            .iter()
            .filter(|a| cohort.contains(&a.report_id))
            .cloned()
            .collect()
    }

    pub fn active_loop(&self, lineage_root: u32) -> Option<&LoopState> {
        self.loops
            .values()
            .find(|l| l.lineage_root == lineage_root && l.status.is_active())
    }
}

/// Replays `session.jsonl` under `root`. A fresh log is seeded from an
/// existing `prompts.json`, so lineages created from the CLI carry over.
pub fn open_log(root: &Path) -> Result<(EventLog, SessionState), HarnessError> {
    let log = EventLog::new(root.join(SESSION_LOG));
    let mut events: Vec<SessionEvent> = log.read_all()?;
    let prompts = root.join(PROMPTS_FILE);
    if events.is_empty() && prompts.is_file() {
        let seed = SessionEvent::PromptsImported {
            registry: PromptRegistry::load(&prompts)?,
        };
        log.append(&seed)?;
        events.push(seed);
    }
    let state = SessionState::replay(&events)?;
    Ok((log, state))
}
