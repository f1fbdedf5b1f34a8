//! Finding extraction and evaluation toolkit for free-text chest X-ray reports.
//!
//! The crate is organised around the pipeline it serves:
//!
//! - [`taxonomy`]: the fixed 21-label finding schema and name resolution.
//! - [`corpus`]: report ingestion, section parsing, PHI scrubbing and cohort splits.
//! - [`labeler`]: versioned prompts, completion backends and strict-binary response parsing.
//! - [`reference`]: multi-reader majority vote and Cohen's kappa.
//! - [`metrics`]: Clopper-Pearson intervals, confusion-based metrics, Ran Score and McNemar.
//! - [`tables`]: CSV and Markdown emitters for accuracy, optimisation and leaderboard tables.
//! - [`harness`]: validation runs, gates, triage queues, prompt lineage and benchmarking.
//! - [`synthetic`]: seeded fixture cohorts with known labels and simulated readers.

pub mod corpus;
pub mod harness;
pub mod labeler;
pub mod metrics;
pub mod reference;
pub mod synthetic;
pub mod tables;
pub mod taxonomy;

pub use corpus::{CohortTag, Corpus, CorpusStats, LanguageTag, Report};
pub use labeler::{LabelMatrix, LabelValues, LabelVector, PromptVersion};
pub use harness::{EvaluationRun, GateResult, PromptRegistry, Revision, TriageCase};
pub use metrics::{Confusion, IntervalEstimate, MetricReport};
pub use reference::{ReaderAnnotation, ReferenceStandard, ReferenceState, Vote};
pub use taxonomy::{FindingLabel, LabelId, PerLabel, Taxonomy, LABEL_COUNT};
