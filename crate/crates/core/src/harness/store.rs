//! On-disk run directories, leaderboard export and the JSONL event log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{EvaluationRun, HarnessError, RunKind, RunManifest, TriageCase};
use crate::labeler::LabelMatrix;
use crate::metrics::metric_report_with_alpha;
use crate::reference::ReferenceStandard;
use crate::tables::{metrics_csv, metrics_markdown, Leaderboard, LeaderboardRow};

pub const RUNS_DIR: &str = "runs";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const LEADERBOARD_CSV: &str = "leaderboard.csv";
pub const LEADERBOARD_MD: &str = "leaderboard.md";

/// Write through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, HarnessError> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Append-only JSON-lines log. Each record is written with a single call.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl EventLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, event: &T) -> Result<(), HarnessError> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        let _guard = self.lock.lock().expect("event log lock");
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }

    /// All records in order; a missing file is an empty log.
    pub fn read_all<T: DeserializeOwned>(&self) -> Result<Vec<T>, HarnessError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| {
                HarnessError::InvalidArgument(format!("{} line {}: {e}", self.path.display(), n + 1))
            })?);
        }
        Ok(out)
    }
}

/// Harness-level events written next to the runs directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum RunEvent {
    RunCompleted {
        run_id: String,
        kind: RunKind,
        prompt_version: u32,
        created_at: chrono::DateTime<chrono::Utc>,
    },
    LeaderboardWritten {
        models: Vec<String>,
    },
}

/// `<root>/runs/<run_id>/…`, `<root>/leaderboard.{csv,md}` and `<root>/events.jsonl`.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    events: EventLog,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let root = root.into();
        fs::create_dir_all(root.join(RUNS_DIR))?;
        let events = EventLog::new(root.join(EVENTS_FILE));
        Ok(Self { root, events })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(RUNS_DIR).join(run_id)
    }

    /// Write every artifact of a run. Contents depend only on the run's inputs.
    pub fn write_run(&self, run: &EvaluationRun, triage: &[TriageCase]) -> Result<PathBuf, HarnessError> {
        let dir = self.run_dir(&run.run_id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("config.json"), &json_bytes(&run.manifest())?)?;

        let mut pred = Vec::new();
        run.predictions.write_csv(&mut pred)?;
        write_atomic(&dir.join("labels_pred.csv"), &pred)?;
        let mut reference = Vec::new();
        run.reference.write_csv(&mut reference)?;
        write_atomic(&dir.join("labels_ref.csv"), &reference)?;

        write_atomic(&dir.join("metrics.csv"), metrics_csv(&run.metric_report).as_bytes())?;
        write_atomic(&dir.join("metrics.md"), metrics_markdown(&run.metric_report).as_bytes())?;
        write_atomic(&dir.join("gate.json"), &json_bytes(&run.gate_result)?)?;

        let mut lines = String::new();
        for case in triage {
            lines.push_str(&serde_json::to_string(case)?);
            lines.push('\n');
        }
        write_atomic(&dir.join("triage.jsonl"), lines.as_bytes())?;

        self.events.append(&RunEvent::RunCompleted {
            run_id: run.run_id.clone(),
            kind: run.kind,
            prompt_version: run.prompt_version,
            created_at: run.created_at.unwrap_or_else(chrono::Utc::now),
        })?;
        Ok(dir)
    }

    /// Rebuild a run from its directory; metrics are recomputed from the label files.
    pub fn load_run(&self, run_id: &str) -> Result<EvaluationRun, HarnessError> {
        let dir = self.run_dir(run_id);
        if !dir.is_dir() {
            return Err(HarnessError::UnknownRun(run_id.to_string()));
        }
        let manifest: RunManifest = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let predictions = LabelMatrix::read_csv(File::open(dir.join("labels_pred.csv"))?)?;
        let reference = ReferenceStandard::read_csv(File::open(dir.join("labels_ref.csv"))?)?;
        let metric_report = metric_report_with_alpha(&predictions, &reference, manifest.config.alpha)?;
        let gate_result = serde_json::from_slice(&fs::read(dir.join("gate.json"))?)?;
        let created_at = self
            .events
            .read_all::<RunEvent>()?
            .into_iter()
            .find_map(|e| match e {
                RunEvent::RunCompleted { run_id: id, created_at, .. } if id == run_id => Some(created_at),
                _ => None,
            });
        Ok(EvaluationRun::from_parts(manifest, created_at, predictions, reference, metric_report, gate_result))
    }

    pub fn load_triage(&self, run_id: &str) -> Result<Vec<TriageCase>, HarnessError> {
        let path = self.run_dir(run_id).join("triage.jsonl");
        if !path.is_file() {
            return Err(HarnessError::UnknownRun(run_id.to_string()));
        }
        EventLog::new(path).read_all()
    }

    pub fn run_ids(&self) -> Result<Vec<String>, HarnessError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join(RUNS_DIR))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn write_leaderboard(&self, board: &Leaderboard) -> Result<(), HarnessError> {
        write_atomic(&self.root.join(LEADERBOARD_CSV), board.to_csv().as_bytes())?;
        write_atomic(&self.root.join(LEADERBOARD_MD), board.to_markdown().as_bytes())?;
        self.events.append(&RunEvent::LeaderboardWritten {
            models: board.rows.iter().map(|r| r.model.clone()).collect(),
        })?;
        Ok(())
    }

    /// Leaderboard over every stored generation benchmark.
    pub fn leaderboard(&self) -> Result<Leaderboard, HarnessError> {
        let mut rows = Vec::new();
        for id in self.run_ids()? {
            let run = self.load_run(&id)?;
            if run.kind == RunKind::GenerationBenchmark {
                rows.push(LeaderboardRow::from_report(
                    run.model.as_deref().unwrap_or(&run.cohort_tag),
                    &run.metric_report,
                    Some(run.run_id.clone()),
                ));
            }
        }
        Ok(Leaderboard::new(rows))
    }
}
