use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cxrlab_core::corpus::{read_records_jsonl, ReportRecord};
use cxrlab_core::labeler::{LabelMatrix, LabelValues};
use cxrlab_core::reference::read_annotations_csv;
use cxrlab_core::taxonomy::resolve_label;
use cxrlab_core::{LabelId, ReferenceStandard};

fn cxrlab(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxrlab"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("CXRLAB_CONFIG")
        .output()
        .unwrap()
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = cxrlab(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(workdir: &Path, args: &[&str]) -> (i32, String) {
    let out = cxrlab(workdir, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic reports, annotations and a corpus store plus majority-vote reference.
fn prepared(n: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    ok(&w, &["synth", "--n", n]);
    ok(&w, &["ingest", s(&w.join("synth/reports.jsonl"))]);
    ok(&w, &["aggregate", "--annotations", s(&w.join("synth/annotations.csv"))]);
    (dir, w)
}

fn run_id(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("run "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .to_string()
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn validate_writes_gate_and_passes_on_clean_reference() {
    let (_d, w) = prepared("60");
    let out = ok(&w, &["validate", "--cohort", "dev", "--strict"]);
    let id = run_id(&out);
    let run = w.join("runs").join(&id);
    for f in ["config.json", "gate.json", "metrics.csv", "metrics.md", "labels_pred.csv", "labels_ref.csv", "triage.jsonl"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let gate: Value = serde_json::from_slice(&fs::read(run.join("gate.json")).unwrap()).unwrap();
    assert_eq!(gate["all_passed"], true);
    let config: Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["config"]["backend"]["kind"], "mock");
    assert_eq!(config["run_id"], id);
}

#[test]
fn identical_inputs_give_byte_identical_artifacts() {
    let (_a, wa) = prepared("40");
    let (_b, wb) = prepared("40");
    for f in ["synth/reports.jsonl", "synth/annotations.csv", "corpus.jsonl", "reference.csv"] {
        assert_eq!(fs::read(wa.join(f)).unwrap(), fs::read(wb.join(f)).unwrap(), "{f}");
    }
    let ia = run_id(&ok(&wa, &["validate", "--parallelism", "1"]));
    let ib = run_id(&ok(&wb, &["validate", "--parallelism", "1"]));
    assert_eq!(ia, ib);
    assert_eq!(dir_bytes(&wa.join("runs").join(&ia)), dir_bytes(&wb.join("runs").join(&ib)));
}

#[test]
fn ingest_reports_duplicates_and_dropped_sections() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    let input = dir.path().join("in.jsonl");
    fs::write(
        &input,
        "{\"report_id\":\"a\",\"text\":\"FINDINGS: Clear lungs.\\nIMPRESSION: Normal.\"}\n{\"report_id\":\"b\",\"text\":\"FINDINGS: Clear lungs.\"}\n",
    )
    .unwrap();
    let out = ok(&w, &["ingest", "--require-sections", s(&input)]);
    assert!(out.contains("accepted 1 reports"), "{out}");
    assert!(out.contains("dropped without sections: 1"), "{out}");
    assert!(out.contains("Reports, n"), "{out}");

    fs::write(&input, "{\"report_id\":\"a\",\"text\":\"x\"}\n{\"report_id\":\"a\",\"text\":\"y\"}\n").unwrap();
    let (c, err) = code(&w, &["ingest", s(&input)]);
    assert_eq!(c, 2);
    assert!(err.contains("\"a\""), "{err}");

    let (c, _) = code(&w, &["ingest", s(&dir.path().join("missing.jsonl"))]);
    assert_eq!(c, 1);
}

#[test]
fn aggregate_marks_three_three_splits_unresolved() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<&str> = LabelId::all().map(|l| l.name()).collect();
    let mut csv = format!("reader_id,report_id,{}\n", labels.join(","));
    for r in 1..=6 {
        let edema = if r <= 3 { "1" } else { "0" };
        let row: Vec<&str> = LabelId::all().map(|l| if l.name() == "Edema" { edema } else { "0" }).collect();
        csv.push_str(&format!("R{r},s1,{}\n", row.join(",")));
    }
    let input = dir.path().join("readers.csv");
    fs::write(&input, csv).unwrap();
    let out = ok(dir.path(), &["aggregate", "--annotations", s(&input)]);
    assert!(out.contains("unresolved cells: 1"), "{out}");
    let reference = ReferenceStandard::read_csv(fs::File::open(dir.path().join("reference.csv")).unwrap()).unwrap();
    assert_eq!(reference.state("s1", resolve_label("Edema").unwrap().id).unwrap().code(), "U");

    let (c, err) = code(dir.path(), &["aggregate", "--annotations", s(&input), "--quorum", "3"]);
    assert_eq!(c, 2, "{err}");
}

#[test]
fn strict_validation_exits_four_on_gate_failure() {
    let (_d, w) = prepared("40");
    let truth = LabelMatrix::read_csv(fs::File::open(w.join("synth/truth.csv")).unwrap()).unwrap();
    let edema = resolve_label("Edema").unwrap().id;
    let mut flipped = LabelMatrix::new();
    for (i, (id, v)) in truth.iter().enumerate() {
        let mut v: LabelValues = *v;
        if i < 8 {
            v.set(edema, !v.get(edema));
        }
        flipped.insert(id.to_string(), v).unwrap();
    }
    let mut csv = Vec::new();
    ReferenceStandard::from_binary(&flipped).write_csv(&mut csv).unwrap();
    let reference = w.join("flipped.csv");
    fs::write(&reference, csv).unwrap();

    let (c, _) = code(&w, &["validate", "--reference", s(&reference), "--strict"]);
    assert_eq!(c, 4);
    let out = ok(&w, &["validate", "--reference", s(&reference)]);
    assert!(out.contains("FAIL Edema"), "{out}");
    let triage = ok(&w, &["triage", "--run", &run_id(&out), "--label", "edema"]);
    assert_eq!(triage.lines().count(), 1 + 8, "{triage}");
}

#[test]
fn prompt_lineage_and_frozen_versions() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(w, &["init-prompt"]);
    let out = ok(w, &["refine", "--from", "1", "--synonym", "Pneumothorax=ptx", "--exemplar-neg", "Edema=no edema"]);
    assert!(out.contains("version 2 from 1 (2 revisions)"), "{out}");
    ok(w, &["freeze", "--version", "2"]);
    let (c, err) = code(w, &["refine", "--from", "2", "--clarify", "Edema=interstitial"]);
    assert_eq!(c, 2);
    assert!(err.contains("frozen"), "{err}");
    let (c, _) = code(w, &["refine", "--from", "1"]);
    assert_eq!(c, 2);
    let (c, _) = code(w, &["refine", "--from", "1", "--synonym", "Brain Lesion=x"]);
    assert_eq!(c, 2);
    let listing = ok(w, &["prompts"]);
    assert_eq!(listing.lines().count(), 3, "{listing}");
    assert!(listing.lines().nth(2).unwrap().contains("yes"), "{listing}");
}

#[test]
fn benchmark_writes_leaderboard_over_model_directories() {
    let (_d, w) = prepared("50");
    let models = w.join("synth/models");
    let reports = w.join("synth/reports.jsonl");
    let args = ["benchmark", "--models", s(&models), "--reference-reports", s(&reports), "--frozen-version", "1"];
    let (c, _) = code(&w, &args);
    assert_eq!(c, 2);
    ok(&w, &["freeze", "--version", "1"]);
    ok(&w, &args);
    let board = fs::read_to_string(w.join("leaderboard.csv")).unwrap();
    let rows: Vec<&str> = board.lines().collect();
    assert_eq!(rows.len(), 3, "{board}");
    assert!(rows[0].starts_with("model,micro_accuracy"));
    assert!(rows[1].starts_with("echo,1.000"));
    assert!(rows[2].starts_with("constant,"));
    assert!(w.join("leaderboard.md").is_file());
}

#[test]
fn backend_errors_map_to_exit_codes_and_keys_stay_out_of_artifacts() {
    let (_d, w) = prepared("20");
    let (c, err) = code(&w, &["validate", "--backend", "http"]);
    assert_eq!(c, 2, "{err}");
    let out = Command::new(env!("CARGO_BIN_EXE_cxrlab"))
        .args(["--workdir", s(&w), "validate", "--backend", "http", "--endpoint", "http://127.0.0.1:9/v1", "--model", "m"])
        .env("CXRLAB_API_KEY", "sk-do-not-store")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(env!("CARGO_BIN_EXE_cxrlab"))
        .args(["--workdir", s(&w), "validate"])
        .env("CXRLAB_API_KEY", "sk-do-not-store")
        .output()
        .unwrap();
    assert!(out.status.success());
    for entry in walk(&w) {
        let bytes = fs::read(&entry).unwrap();
        assert!(!String::from_utf8_lossy(&bytes).contains("sk-do-not-store"), "{}", entry.display());
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let (d, w) = prepared("20");
    let cfg = d.path().join("cxrlab.toml");
    fs::write(&cfg, "[run.thresholds]\naccuracy = 1.01\n").unwrap();
    let (c, _) = code(&w, &["--config", s(&cfg), "validate", "--strict"]);
    assert_eq!(c, 4);
    ok(&w, &["--config", s(&cfg), "--accuracy-threshold", "0.9", "validate", "--strict"]);
    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(code(&w, &["--config", s(&cfg), "prompts"]).0, 2);
}

#[test]
fn split_tags_disjoint_cohorts() {
    let (_d, w) = prepared("30");
    ok(&w, &["--seed", "5", "split", "--dev", "10", "--test", "15"]);
    let cohorts = fs::read_to_string(w.join("cohorts.csv")).unwrap();
    assert_eq!(cohorts.lines().count(), 26);
    let out = ok(&w, &["validate", "--cohort", "test"]);
    assert!(out.contains("cohort test  reports 15"), "{out}");
    let (c, _) = code(&w, &["split", "--dev", "31"]);
    assert_eq!(c, 2);
}

// CLI and HTTP API driven from the same inputs.

struct Api {
    app: axum::Router,
}

impl Api {
    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(v) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn json(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (s, b) = self.call(method, uri, body).await;
        (s, serde_json::from_slice(&b).unwrap())
    }

    async fn poll(&self, uri: &str) -> Value {
        let start = Instant::now();
        loop {
            let (_, v) = self.json(Method::GET, uri, None).await;
            if v["status"] != "running" {
                return v;
            }
            assert!(start.elapsed() < Duration::from_secs(30), "{v}");
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

fn records(path: &Path) -> Vec<ReportRecord> {
    read_records_jsonl(std::io::BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

async fn api_session(root: &Path, reports: &[ReportRecord]) -> Api {
    let state = cxrlab_service::AppState::open(cxrlab_service::ServiceConfig::new(root)).unwrap();
    let api = Api {
        app: cxrlab_service::router(state),
    };
    let reports: Vec<Value> = reports.iter().map(|r| json!({ "report_id": r.report_id, "text": r.text })).collect();
    let (s, _) = api.call(Method::POST, "/cohorts", Some(json!({ "cohort": "dev", "reports": reports }))).await;
    assert_eq!(s, StatusCode::CREATED);
    api
}

#[tokio::test(flavor = "multi_thread")]
async fn api_and_cli_produce_identical_runs() {
    let (d, w) = prepared("40");
    let cli_run = run_id(&ok(&w, &["validate", "--cohort", "dev"]));

    let root = d.path().join("api");
    let api = api_session(&root, &records(&w.join("synth/reports.jsonl"))).await;
    let annotations = read_annotations_csv(fs::File::open(w.join("synth/annotations.csv")).unwrap()).unwrap();
    for a in &annotations {
        let values: serde_json::Map<String, Value> =
            LabelId::all().map(|l| (l.name().to_string(), json!(a.values[l].as_i64()))).collect();
        let body = json!({ "reader_id": a.reader_id, "report_id": a.report_id, "values": values });
        assert_eq!(api.call(Method::POST, "/annotations", Some(body)).await.0, StatusCode::CREATED);
    }
    let (_, reference) = api.call(Method::GET, "/reference?cohort=dev&format=csv", None).await;
    assert_eq!(reference, fs::read(w.join("reference.csv")).unwrap());

    let (s, accepted) = api.json(Method::POST, "/runs/validate", Some(json!({ "cohort": "dev" }))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = api.poll(accepted["poll"].as_str().unwrap()).await;
    assert_eq!(job["run_ids"][0], cli_run.as_str(), "{job}");
    for f in ["metrics.csv", "gate.json", "config.json", "labels_pred.csv", "labels_ref.csv", "triage.jsonl"] {
        assert_eq!(
            fs::read(root.join("runs").join(&cli_run).join(f)).unwrap(),
            fs::read(w.join("runs").join(&cli_run).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn refinement_loop_via_api_matches_cli_optimize() {
    let d = tempfile::tempdir().unwrap();
    let w = d.path().join("w");
    ok(&w, &["synth", "--n", "30"]);
    let ptx = resolve_label("Pneumothorax").unwrap().id;
    let mut reports = records(&w.join("synth/reports.jsonl"));
    let mut truth = LabelMatrix::read_csv(fs::File::open(w.join("synth/truth.csv")).unwrap()).unwrap();
    for i in 0..3 {
        let id = format!("X{i}");
        reports.push(ReportRecord::new(id.clone(), "FINDINGS: Visceral pleural line at the right apex.\nIMPRESSION: As above."));
        truth.insert(id, LabelValues::from_fn(|l| l == ptx)).unwrap();
    }
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&serde_json::to_string(r).unwrap());
        lines.push('\n');
    }
    let input = d.path().join("reports.jsonl");
    fs::write(&input, lines).unwrap();
    let mut reference = Vec::new();
    ReferenceStandard::from_binary(&truth).write_csv(&mut reference).unwrap();
    let reference = String::from_utf8(reference).unwrap();
    fs::write(w.join("reference.csv"), &reference).unwrap();
    let fix = json!([{ "kind": "ExemplarAdded", "label": "Pneumothorax", "polarity": "positive", "text": "visceral pleural line" }]);
    fs::write(d.path().join("batches.json"), json!([fix]).to_string()).unwrap();

    ok(&w, &["ingest", s(&input)]);
    let out = ok(&w, &["optimize", "--cohort", "dev", "--revisions", s(&d.path().join("batches.json"))]);
    assert!(out.contains("rounds 2"), "{out}");
    let cli_runs: Vec<String> = out.lines().filter(|l| l.starts_with("version ")).map(|l| l.split_whitespace().nth(3).unwrap().to_string()).collect();
    assert_eq!(cli_runs.len(), 2, "{out}");

    let root = d.path().join("api");
    let api = api_session(&root, &reports).await;
    let (s, started) = api
        .json(Method::POST, "/loops", Some(json!({ "cohort": "dev", "reference_csv": reference })))
        .await;
    assert_eq!(s, StatusCode::ACCEPTED, "{started}");
    let poll = started["poll"].as_str().unwrap().to_string();
    let state = api.poll(&poll).await;
    assert_eq!(state["status"], "awaiting_revisions");
    let uri = format!("/loops/{}/revisions", started["loop_id"].as_str().unwrap());
    let (s, _) = api.json(Method::POST, &uri, Some(json!({ "revisions": fix, "reference_csv": reference }))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let state = api.poll(&poll).await;
    assert_eq!(state["status"], "passed", "{state}");
    assert_eq!(state["runs"], json!(cli_runs));
    for run in &cli_runs {
        for f in ["metrics.csv", "gate.json", "config.json", "triage.jsonl"] {
            assert_eq!(
                fs::read(root.join("runs").join(run).join(f)).unwrap(),
                fs::read(w.join("runs").join(run).join(f)).unwrap(),
                "{run}/{f}"
            );
        }
    }
    assert_eq!(fs::read(root.join("prompts.json")).unwrap(), fs::read(w.join("prompts.json")).unwrap());
}
