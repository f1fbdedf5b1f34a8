use super::*;
use crate::corpus::{ingest, IngestOptions, ReportRecord};
use crate::labeler::{LabelValues, MockBackend, ScriptedBackend};
use crate::synthetic::{constant_outputs, synthetic_cohort, CONSTANT_NORMAL_REPORT};
use crate::taxonomy::resolve_label;

fn id(name: &str) -> LabelId {
    resolve_label(name).unwrap().id
}

fn config() -> RunConfig {
    RunConfig::default()
}

fn cohort(n: usize, seed: u64) -> (Corpus, LabelMatrix, ReferenceStandard) {
    let (corpus, truth) = synthetic_cohort(n, seed).unwrap();
    let reference = ReferenceStandard::from_binary(&truth);
    (corpus, truth, reference)
}

fn with_flips(truth: &LabelMatrix, label: LabelId, ids: &[&str]) -> LabelMatrix {
    let mut out = LabelMatrix::new();
    for (rid, values) in truth.iter() {
        let mut v = *values;
        if ids.contains(&rid) {
            v.set(label, !v.get(label));
        }
        out.insert(rid.to_string(), v).unwrap();
    }
    out
}

#[test]
fn self_consistent_reference_passes_everything() {
    let (corpus, _, reference) = cohort(60, 1);
    let run = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    assert!(run.passed());
    assert!(run.metric_report.per_label.iter().all(|m| m.accuracy.unwrap().point == 1.0));
    assert!(run.failures.is_empty());
    assert!(triage_queue(&run, &corpus).is_empty());
}

#[test]
fn perturbed_label_fails_gate() {
    let (corpus, truth, _) = cohort(100, 2);
    let edema = id("Edema");
    let flipped: Vec<String> = corpus.reports().iter().take(15).map(|r| r.report_id.clone()).collect();
    let flipped: Vec<&str> = flipped.iter().map(String::as_str).collect();
    let reference = ReferenceStandard::from_binary(&with_flips(&truth, edema, &flipped));
    let run = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    let gate = run.gate_result.as_ref().unwrap();
    assert!(!gate.all_passed);
    assert_eq!(gate.failing().collect::<Vec<_>>(), [edema]);
    assert!((gate.per_label[edema.index()].accuracy.unwrap() - 0.85).abs() < 1e-12);
}

#[test]
fn accuracies_match_bruteforce_on_noisy_reference() {
    use crate::reference::build_reference;
    use crate::synthetic::{simulate_readers, ReaderNoise};
    let (corpus, truth) = synthetic_cohort(300, 3).unwrap();
    let anns = simulate_readers(&truth, 6, ReaderNoise { flip: 0.1, uncertain: 0.1 }, 4);
    let reference = build_reference(&anns, 4).unwrap();
    let run = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    for label in LabelId::all() {
        let (mut correct, mut n) = (0u64, 0u64);
        for r in corpus.reports() {
            let state = reference.state(&r.report_id, label).unwrap();
            if state == ReferenceState::Unresolved {
                continue;
            }
            n += 1;
            let predicted = truth.get(&r.report_id).unwrap().get(label);
            correct += (predicted == (state == ReferenceState::Positive)) as u64;
        }
        let m = run.metric_report.label(label);
        assert_eq!(m.confusion.total(), n);
        assert_eq!(m.accuracy.unwrap().x, correct);
    }
}

#[test]
fn triage_lists_every_error_in_order() {
    let (corpus, truth, _) = cohort(80, 5);
    let fracture = id("Fracture");
    let picked = ["S0070", "S0003", "S0041"];
    let reference = ReferenceStandard::from_binary(&with_flips(&truth, fracture, &picked));
    let run = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    let queue = triage_queue(&run, &corpus);
    assert_eq!(queue.len(), 3);
    assert!(queue.iter().all(|c| c.label == fracture));
    assert_eq!(queue.iter().map(|c| c.report_id.as_str()).collect::<Vec<_>>(), ["S0003", "S0041", "S0070"]);
    assert_eq!(queue[0].case_id, format!("{}.0", run.run_id));
    let errors: u64 = run.metric_report.per_label.iter().map(|m| m.confusion.errors()).sum();
    assert_eq!(queue.len() as u64, errors);
    for case in &queue {
        let text = &corpus.get(&case.report_id).unwrap().raw_text;
        assert!(text.contains(&case.report_text_excerpt));
        assert!(case.report_text_excerpt.chars().count() <= EXCERPT_CHARS);
    }
}

#[test]
fn labeling_failures_are_recorded_or_fatal() {
    let (corpus, _, reference) = cohort(20, 6);
    let target = corpus.reports()[4].raw_text.clone();
    let backend = ScriptedBackend::replies(Vec::<String>::new())
        .with_fallback(MockBackend::new())
        .for_report(&target, [Ok("garbage".to_string())]);
    let mut cfg = config();
    cfg.max_failure_fraction = 0.10;
    let run = validate_labeler(&backend, &PromptVersion::root(1), &corpus, "dev", &reference, &cfg).unwrap();
    assert_eq!(run.failures.len(), 1);
    assert_eq!(run.predictions.len(), 19);
    assert_eq!(run.reference.len(), 19);

    cfg.max_failure_fraction = 0.0;
    assert!(matches!(
        validate_labeler(&backend, &PromptVersion::root(1), &corpus, "dev", &reference, &cfg),
        Err(HarnessError::TooManyFailures { failed: 1, total: 20, .. })
    ));
}

#[test]
fn reference_must_cover_cohort() {
    let (corpus, truth, _) = cohort(10, 7);
    let partial = ReferenceStandard::from_binary(&truth.restrict(["S0000", "S0001"]));
    assert!(matches!(
        validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &partial, &config()),
        Err(HarnessError::ReferenceMissingReport(id)) if id == "S0002"
    ));
}

#[test]
fn reruns_are_bit_identical() {
    let (corpus, _, reference) = cohort(50, 8);
    let run = || validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.run_id, b.run_id);
    assert_eq!(a.metric_report, b.metric_report);
    assert_eq!(a.predictions, b.predictions);
}

/// Synthetic cohort plus reports the keyword table cannot recognise.
fn cohort_with_blind_spot() -> (Corpus, ReferenceStandard) {
    let (corpus, truth) = synthetic_cohort(60, 9).unwrap();
    let ptx = id("Pneumothorax");
    let mut records: Vec<ReportRecord> = corpus
        .reports()
        .iter()
        .map(|r| ReportRecord::new(r.report_id.clone(), r.raw_text.clone()))
        .collect();
    let mut truth = truth;
    for i in 0..3 {
        let rid = format!("X{i}");
        records.push(ReportRecord::new(
            rid.clone(),
            "FINDINGS: Visceral pleural line at the right apex.\nIMPRESSION: Findings as described above.",
        ));
        truth.insert(rid, LabelValues::from_fn(|l| l == ptx)).unwrap();
    }
    let (corpus, _) = ingest(records, &IngestOptions::default()).unwrap();
    (corpus, ReferenceStandard::from_binary(&truth))
}

#[test]
fn loop_returns_immediately_when_gate_passes() {
    let (corpus, _, reference) = cohort(40, 10);
    let mut registry = PromptRegistry::with_root();
    let out = optimization_loop(&mut registry, &MockBackend::new(), 1, &corpus, "dev", &reference, &config(), 5, &mut NoRevisions).unwrap();
    assert!(out.passed);
    assert_eq!(out.lineage, [1]);
    assert_eq!(registry.versions().count(), 1);
}

#[test]
fn scripted_revision_fixes_blind_spot_in_round_two() {
    let (corpus, reference) = cohort_with_blind_spot();
    let ptx = id("Pneumothorax");
    let mut registry = PromptRegistry::with_root();
    let mut source = ScriptedRevisions::new([vec![Revision::ExemplarAdded {
        label: ptx,
        polarity: Polarity::Positive,
        text: "visceral pleural line".into(),
    }]]);
    let out = optimization_loop(&mut registry, &MockBackend::new(), 1, &corpus, "dev", &reference, &config(), 4, &mut source).unwrap();
    assert!(out.passed);
    assert_eq!(out.rounds, 2);
    assert_eq!(out.lineage, [1, 2]);
    assert!(!out.runs[0].passed());
    assert_eq!(out.runs[0].gate_result.as_ref().unwrap().failing().collect::<Vec<_>>(), [ptx]);
    assert_eq!(registry.get(2).unwrap().parent_version, Some(1));
    assert_eq!(registry.get(1).unwrap(), &PromptVersion::root(1));
}

#[test]
fn loop_without_revisions_exhausts_rounds() {
    let (corpus, reference) = cohort_with_blind_spot();
    let mut registry = PromptRegistry::with_root();
    let err = optimization_loop(&mut registry, &MockBackend::new(), 1, &corpus, "dev", &reference, &config(), 3, &mut NoRevisions).unwrap_err();
    match err {
        HarnessError::MaxRoundsExceeded { rounds, outcome } => {
            assert_eq!(rounds, 3);
            assert_eq!(outcome.rounds, 3);
            assert!(!outcome.passed);
            assert_eq!(outcome.lineage, [1]);
            assert_eq!(outcome.final_run().prompt_version, 1);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(registry.versions().count(), 1);
}

#[test]
fn loop_refuses_frozen_root() {
    let (corpus, reference) = cohort_with_blind_spot();
    let mut registry = PromptRegistry::with_root();
    registry.freeze(1).unwrap();
    let mut source = ScriptedRevisions::new([vec![Revision::SynonymAdded { label: id("Pneumothorax"), term: "pleural line".into() }]]);
    let err = optimization_loop(&mut registry, &MockBackend::new(), 1, &corpus, "dev", &reference, &config(), 3, &mut source).unwrap_err();
    assert!(matches!(err, HarnessError::FrozenVersionViolation(_)));
}

fn frozen_registry() -> PromptRegistry {
    let mut registry = PromptRegistry::with_root();
    registry.freeze(1).unwrap();
    registry
}

#[test]
fn benchmark_requires_frozen_version() {
    let (corpus, _, _) = cohort(10, 11);
    let registry = PromptRegistry::with_root();
    let err = benchmark_generation(&corpus, &corpus, &MockBackend::new(), &registry, 1, "m", "test", &config()).unwrap_err();
    assert!(matches!(err, HarnessError::FrozenVersionViolation(_)));
}

#[test]
fn benchmark_identical_outputs_score_one() {
    let (corpus, _, _) = cohort(80, 12);
    let run = benchmark_generation(&corpus, &corpus, &MockBackend::new(), &frozen_registry(), 1, "echo", "test", &config()).unwrap();
    assert_eq!(run.kind, RunKind::GenerationBenchmark);
    assert_eq!(run.metric_report.macro_f1(), 1.0);
    assert_eq!(run.model.as_deref(), Some("echo"));
    assert!(run.gate_result.is_none());
}

#[test]
fn constant_normal_model_has_prevalence_gap() {
    let (corpus, truth, _) = cohort(300, 13);
    let outputs = constant_outputs(&corpus, CONSTANT_NORMAL_REPORT).unwrap();
    let run = benchmark_generation(&outputs, &corpus, &MockBackend::new(), &frozen_registry(), 1, "constant", "test", &config()).unwrap();
    let report = &run.metric_report;
    assert!(report.macro_avg.f1 < report.micro.accuracy);
    assert!(report.micro.accuracy > 0.85);
    assert!(report.macro_avg.f1 < 0.1);

    // Only No Finding is ever predicted, so only its row can score.
    let nf = id("No Finding");
    let (mut tp, mut fp) = (0.0, 0.0);
    for (_, v) in truth.iter() {
        if v.get(nf) { tp += 1.0 } else { fp += 1.0 }
    }
    let f1_nf = 2.0 * tp / (2.0 * tp + fp);
    let included = LabelId::all().filter(|l| truth.iter().any(|(_, v)| v.get(*l))).count() as f64;
    assert!((report.macro_avg.f1 - f1_nf / included).abs() < 1e-12);
}

#[test]
fn benchmark_report_sets_must_match() {
    let (corpus, _, _) = cohort(10, 14);
    let fewer = corpus.filter(|r| r.report_id != "S0005");
    let err = benchmark_generation(&fewer, &corpus, &MockBackend::new(), &frozen_registry(), 1, "m", "test", &config()).unwrap_err();
    assert!(matches!(err, HarnessError::Metric(MetricError::ReportSetMismatch { only_left: 0, only_right: 1, .. })));
}

#[test]
fn compare_run_with_itself_and_mismatch() {
    let (corpus, truth, reference) = cohort(40, 15);
    let run = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    let cmp = compare_runs(&run, &run).unwrap();
    assert!(cmp.per_label.iter().all(|d| d.delta_f1 == 0.0 && d.test.p_value == 1.0));
    assert_eq!(cmp.macro_delta_f1, 0.0);

    let other_ref = ReferenceStandard::from_binary(&with_flips(&truth, id("Edema"), &["S0001"]));
    let other = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &other_ref, &config()).unwrap();
    assert!(matches!(compare_runs(&run, &other), Err(HarnessError::CohortMismatch(_))));
}

#[test]
fn compare_reports_f1_change_and_discordance() {
    let (corpus, reference) = cohort_with_blind_spot();
    let ptx = id("Pneumothorax");
    let mut registry = PromptRegistry::with_root();
    let v2 = registry
        .refine(1, &[Revision::ExemplarAdded { label: ptx, polarity: Polarity::Positive, text: "visceral pleural line".into() }])
        .unwrap()
        .clone();
    let pre = validate_labeler(&MockBackend::new(), registry.get(1).unwrap(), &corpus, "dev", &reference, &config()).unwrap();
    let post = validate_labeler(&MockBackend::new(), &v2, &corpus, "dev", &reference, &config()).unwrap();
    let cmp = compare_runs(&pre, &post).unwrap();
    let d = &cmp.per_label[ptx.index()];
    assert!((d.delta_f1 - (d.f1_b - d.f1_a)).abs() < 1e-15);
    assert!(d.delta_f1 > 0.0);
    assert_eq!((d.test.b, d.test.c), (0, 3));
    assert!((d.test.p_value - 0.25).abs() < 1e-12);
}

#[test]
fn stored_runs_round_trip_and_are_reproducible() {
    let (corpus, _, reference) = cohort(30, 16);
    let run = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    let triage = triage_queue(&run, &corpus);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, sb) = (RunStore::open(a.path()).unwrap(), RunStore::open(b.path()).unwrap());
    let da = sa.write_run(&run, &triage).unwrap();
    let rerun = validate_labeler(&MockBackend::new(), &PromptVersion::root(1), &corpus, "dev", &reference, &config()).unwrap();
    let db = sb.write_run(&rerun, &triage_queue(&rerun, &corpus)).unwrap();
    for name in ["config.json", "labels_pred.csv", "labels_ref.csv", "metrics.csv", "metrics.md", "gate.json", "triage.jsonl"] {
        assert_eq!(std::fs::read(da.join(name)).unwrap(), std::fs::read(db.join(name)).unwrap(), "{name}");
    }
    let loaded = sa.load_run(&run.run_id).unwrap();
    assert_eq!(loaded.metric_report, run.metric_report);
    assert_eq!(loaded.gate_result, run.gate_result);
    assert_eq!(loaded.created_at, run.created_at);
    assert_eq!(sa.run_ids().unwrap(), std::slice::from_ref(&run.run_id));
    assert!(matches!(sa.load_run("nope"), Err(HarnessError::UnknownRun(_))));
    let events: Vec<RunEvent> = sa.events().read_all().unwrap();
    assert_eq!(events.len(), 1);
}

#[test]
fn leaderboard_from_stored_benchmarks() {
    let (corpus, _, _) = cohort(60, 17);
    let registry = frozen_registry();
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    let constant = constant_outputs(&corpus, CONSTANT_NORMAL_REPORT).unwrap();
    for (model, outputs) in [("echo", &corpus), ("constant", &constant)] {
        let run = benchmark_generation(outputs, &corpus, &MockBackend::new(), &registry, 1, model, "test", &config()).unwrap();
        store.write_run(&run, &[]).unwrap();
    }
    let board = store.leaderboard().unwrap();
    assert_eq!(board.rows.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ["echo", "constant"]);
    store.write_leaderboard(&board).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(store::LEADERBOARD_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
