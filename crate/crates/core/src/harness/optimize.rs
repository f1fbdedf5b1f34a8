//! The human-gated refinement loop: validate, triage, wait for revisions, refine.

use std::collections::VecDeque;

use super::{triage_queue, validate_labeler, EvaluationRun, HarnessError, PromptRegistry, Revision, RunConfig, TriageCase};
use crate::corpus::Corpus;
use crate::labeler::Backend;
use crate::reference::ReferenceStandard;

/// Supplies revisions after a failing round. The loop never invents them.
pub trait RevisionSource {
    /// An empty list means nothing was supplied for this round.
    fn revisions(&mut self, round: u32, run: &EvaluationRun, queue: &[TriageCase]) -> Vec<Revision>;
}

/// Never supplies anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoRevisions;

impl RevisionSource for NoRevisions {
    fn revisions(&mut self, _: u32, _: &EvaluationRun, _: &[TriageCase]) -> Vec<Revision> {
        Vec::new()
    }
}

/// Replays pre-recorded revision batches, one per failing round.
#[derive(Debug, Default, Clone)]
pub struct ScriptedRevisions {
    batches: VecDeque<Vec<Revision>>,
}

impl ScriptedRevisions {
    pub fn new(batches: impl IntoIterator<Item = Vec<Revision>>) -> Self {
        Self {
            batches: batches.into_iter().collect(),
        }
    }
}

impl RevisionSource for ScriptedRevisions {
    fn revisions(&mut self, _: u32, _: &EvaluationRun, _: &[TriageCase]) -> Vec<Revision> {
        self.batches.pop_front().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    /// Versions validated, in order.
    pub lineage: Vec<u32>,
    /// One run per validated version.
    pub runs: Vec<EvaluationRun>,
    /// Index into `runs` of the final (or best, when the gate never passed) run.
    pub best: usize,
    pub rounds: u32,
    pub passed: bool,
}

impl LoopOutcome {
    pub fn final_run(&self) -> &EvaluationRun {
        &self.runs[self.best]
    }
}

fn score(run: &EvaluationRun) -> (usize, f64) {
    let passed = run.gate_result.as_ref().map_or(0, |g| g.passed_count());
    (passed, run.metric_report.macro_avg.f1)
}

/// Run rounds until the gate passes or `max_rounds` is spent.
///
/// A round with no supplied revisions produces no new version and does not
/// re-run validation. On exhaustion the error carries the best run so far.
#[allow(clippy::too_many_arguments)]
pub fn optimization_loop(
    registry: &mut PromptRegistry,
    backend: &dyn Backend,
    root_version: u32,
    cohort: &Corpus,
    cohort_tag: &str,
    reference: &ReferenceStandard,
    config: &RunConfig,
    max_rounds: u32,
    source: &mut dyn RevisionSource,
) -> Result<LoopOutcome, HarnessError> {
    if max_rounds == 0 {
        return Err(HarnessError::InvalidArgument("max_rounds must be at least 1".into()));
    }
    let mut current = root_version;
    let mut outcome = LoopOutcome {
        lineage: Vec::new(),
        runs: Vec::new(),
        best: 0,
        rounds: 0,
        passed: false,
    };
    for round in 1..=max_rounds {
        outcome.rounds = round;
        if outcome.lineage.last() != Some(&current) {
            let run = validate_labeler(backend, registry.get(current)?, cohort, cohort_tag, reference, config)?;
            outcome.lineage.push(current);
            outcome.runs.push(run);
            let latest = outcome.runs.len() - 1;
            if score(&outcome.runs[latest]) > score(&outcome.runs[outcome.best]) {
                outcome.best = latest;
            }
            if outcome.runs[latest].passed() {
                outcome.best = latest;
                outcome.passed = true;
                return Ok(outcome);
            }
        }
        if round == max_rounds {
            break;
        }
        let run = outcome.runs.last().expect("validated at least once");
        let queue = triage_queue(run, cohort);
        tracing::info!(round, version = current, cases = queue.len(), "gate failed, waiting for revisions");
        let revisions = source.revisions(round, run, &queue);
        if revisions.is_empty() {
            continue;
        }
        current = registry.refine(current, &revisions)?.version_id;
    }
    Err(HarnessError::MaxRoundsExceeded {
        rounds: max_rounds,
        outcome: Box::new(outcome),
    })
}
