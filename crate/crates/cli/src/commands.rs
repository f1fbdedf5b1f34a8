use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::Args;

use cxrlab_core::corpus::{
    corpus_stats, ingest as ingest_records, read_records_csv, read_records_jsonl, split_cohorts, write_cohort_csv,
    CohortTag, IngestOptions, ReportRecord,
};
use cxrlab_core::harness::store::write_atomic;
use cxrlab_core::harness::{
    benchmark_generation, compare_runs, optimization_loop, triage_queue, validate_labeler, HarnessError, Polarity,
    PromptRegistry, Revision, RunStore, ScriptedRevisions,
};
use cxrlab_core::labeler::{backend_from_config, label_corpus, Backend};
use cxrlab_core::reference::{
    build_reference, interrater_summary, read_annotations_csv, write_annotations_csv, DEFAULT_QUORUM,
};
use cxrlab_core::synthetic::{constant_outputs, simulate_readers, synthetic_reports, ReaderNoise, CONSTANT_NORMAL_REPORT};
use cxrlab_core::tables::{fmt3, Leaderboard, LeaderboardRow, OptimizationTable};
use cxrlab_core::taxonomy::resolve_label;
use cxrlab_core::{Corpus, EvaluationRun, LabelId, LabelMatrix, PerLabel, ReferenceStandard};

use crate::config::CliConfig;
use crate::failure::{Failure, BACKEND, GATE, IO};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const COHORTS_FILE: &str = "cohorts.csv";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const PROMPTS_FILE: &str = cxrlab_service::PROMPTS_FILE;

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(IO, format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_atomic(path, bytes).map_err(|e| io_err(path, e))
}

/// Raw records from a `.csv` (header `report_id,text`) or JSONL file.
fn read_records(path: &Path) -> Result<Vec<ReportRecord>, Failure> {
    let file = open(path)?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let records = if is_csv {
        read_records_csv(file)?
    } else {
        read_records_jsonl(BufReader::new(file))?
    };
    Ok(records)
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    Ok(Corpus::read_jsonl(BufReader::new(open(path)?))?)
}

fn save_corpus(path: &Path, corpus: &Corpus) -> CmdResult {
    let mut out = Vec::new();
    corpus.write_jsonl(&mut out)?;
    write_file(path, &out)
}

/// The reports tagged with `cohort`, or the whole corpus when nothing is tagged.
fn select_cohort(corpus: &Corpus, cohort: &str) -> Result<Corpus, Failure> {
    if corpus.reports().iter().all(|r| r.cohort.is_none()) {
        return Ok(corpus.clone());
    }
    let tag: CohortTag = cohort.parse()?;
    let selected = corpus.cohort(tag);
    if selected.is_empty() {
        return Err(Failure::validation(format!("no reports tagged {}", tag.as_str())));
    }
    Ok(selected)
}

fn load_reference(path: &Path) -> Result<ReferenceStandard, Failure> {
    Ok(ReferenceStandard::read_csv(open(path)?)?)
}

fn registry_path(cfg: &CliConfig) -> PathBuf {
    cfg.path(PROMPTS_FILE)
}

fn load_registry(cfg: &CliConfig) -> Result<PromptRegistry, Failure> {
    let path = registry_path(cfg);
    if path.is_file() {
        Ok(PromptRegistry::load(&path)?)
    } else {
        Ok(PromptRegistry::with_root())
    }
}

fn save_registry(cfg: &CliConfig, registry: &PromptRegistry) -> CmdResult {
    fs::create_dir_all(&cfg.workdir).map_err(|e| io_err(&cfg.workdir, e))?;
    Ok(registry.save(&registry_path(cfg))?)
}

fn backend(cfg: &CliConfig) -> Result<Box<dyn Backend>, Failure> {
    Ok(backend_from_config(&cfg.run.backend)?)
}

fn store(cfg: &CliConfig) -> Result<RunStore, Failure> {
    Ok(RunStore::open(&cfg.workdir)?)
}

fn pick_version(registry: &PromptRegistry, version: Option<u32>) -> Result<u32, Failure> {
    match version {
        Some(v) => Ok(registry.get(v)?.version_id),
        None => Ok(registry.latest().expect("registry has a root").version_id),
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL (`report_id`, `text`) or CSV (`report_id,text`) files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Drop reports missing a Findings or an Impression section.
    #[arg(long)]
    require_sections: bool,
    /// Keep text as given instead of scrubbing identifiers.
    #[arg(long)]
    no_deidentify: bool,
    /// Corpus store to write; defaults to `<workdir>/corpus.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn ingest(cfg: &CliConfig, args: IngestArgs) -> CmdResult {
    let mut records = Vec::new();
    for path in &args.inputs {
        records.extend(read_records(path)?);
    }
    let options = IngestOptions {
        deidentify: !args.no_deidentify,
        require_sections: args.require_sections,
        ..IngestOptions::default()
    };
    let (corpus, summary) = ingest_records(records, &options)?;
    let out = args.out.unwrap_or_else(|| cfg.path(CORPUS_FILE));
    save_corpus(&out, &corpus)?;
    println!("accepted {} reports -> {}", summary.accepted, out.display());
    if args.require_sections {
        println!("dropped without sections: {}", summary.dropped_without_sections);
    }
    println!("identifier removals: {}", summary.phi_removals);
    if !corpus.is_empty() {
        print!("{}", corpus_stats(&corpus)?);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    readers: usize,
    /// Chance a reader votes against the generating label.
    #[arg(long, default_value_t = 0.02)]
    flip: f64,
    /// Chance a reader abstains.
    #[arg(long, default_value_t = 0.02)]
    uncertain: f64,
    /// Output directory; defaults to `<workdir>/synth`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn records_jsonl(records: impl IntoIterator<Item = ReportRecord>) -> Result<Vec<u8>, Failure> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes `reports.jsonl`, `truth.csv`, `annotations.csv` and two model
/// output sets under `models/` (`echo` repeats the reports, `constant` is
/// a normal study everywhere).
pub fn synth(cfg: &CliConfig, args: SynthArgs) -> CmdResult {
    let out = args.out.unwrap_or_else(|| cfg.path("synth"));
    let reports = synthetic_reports(args.n, cfg.seed);
    let mut truth = LabelMatrix::new();
    for r in &reports {
        truth.insert(r.record.report_id.clone(), r.truth)?;
    }
    let records: Vec<ReportRecord> = reports.into_iter().map(|r| r.record).collect();
    write_file(&out.join("reports.jsonl"), &records_jsonl(records.clone())?)?;

    let mut csv = Vec::new();
    truth.write_csv(&mut csv)?;
    write_file(&out.join("truth.csv"), &csv)?;

    let noise = ReaderNoise {
        flip: args.flip,
        uncertain: args.uncertain,
    };
    let annotations = simulate_readers(&truth, args.readers, noise, cfg.seed.wrapping_add(1));
    let mut csv = Vec::new();
    write_annotations_csv(&mut csv, &annotations)?;
    write_file(&out.join("annotations.csv"), &csv)?;

    let (corpus, _) = ingest_records(records.clone(), &IngestOptions::default())?;
    let constant = constant_outputs(&corpus, CONSTANT_NORMAL_REPORT)?;
    write_file(&out.join("models/echo/reports.jsonl"), &records_jsonl(records)?)?;
    let constant_records = constant.reports().iter().map(|r| ReportRecord::new(r.report_id.clone(), r.raw_text.clone()));
    write_file(&out.join("models/constant/reports.jsonl"), &records_jsonl(constant_records)?)?;
    println!("wrote {} reports, {} annotations -> {}", args.n, annotations.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    taxonomy: usize,
    #[arg(long, default_value_t = 0)]
    dev: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    external: usize,
}

/// Tags the corpus store in place and writes `cohorts.csv`.
pub fn split(cfg: &CliConfig, args: SplitArgs) -> CmdResult {
    let path = args.corpus.unwrap_or_else(|| cfg.path(CORPUS_FILE));
    let corpus = load_corpus(&path)?;
    let tags = [CohortTag::Taxonomy, CohortTag::Development, CohortTag::Test, CohortTag::External];
    let sizes = [args.taxonomy, args.dev, args.test, args.external];
    if sizes.iter().all(|&n| n == 0) {
        return Err(Failure::validation("give at least one cohort size"));
    }
    let cohorts = split_cohorts(&corpus, &sizes, cfg.seed)?;
    let assignment: Vec<(String, CohortTag)> = cohorts
        .iter()
        .zip(tags)
        .flat_map(|(ids, tag)| ids.iter().map(move |id| (id.clone(), tag)))
        .collect();
    let mut csv = Vec::new();
    write_cohort_csv(&mut csv, &assignment)?;
    write_file(&cfg.path(COHORTS_FILE), &csv)?;
    save_corpus(&path, &corpus.with_cohorts(&assignment))?;
    for (tag, n) in tags.iter().zip(sizes) {
        if n > 0 {
            println!("{:<12}{n}", tag.as_str());
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "development")]
    cohort: String,
    /// Prompt version; defaults to the newest.
    #[arg(long)]
    version: Option<u32>,
    /// Defaults to `<workdir>/labels.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn label(cfg: &CliConfig, args: LabelArgs) -> CmdResult {
    let corpus = load_corpus(&args.corpus.unwrap_or_else(|| cfg.path(CORPUS_FILE)))?;
    let cohort = select_cohort(&corpus, &args.cohort)?;
    let registry = load_registry(cfg)?;
    let version = registry.get(pick_version(&registry, args.version)?)?;
    let outcome = label_corpus(backend(cfg)?.as_ref(), version, &cohort, &cfg.run.backend)?;
    let out = args.out.unwrap_or_else(|| cfg.path(LABELS_FILE));
    let mut csv = Vec::new();
    outcome.matrix.write_csv(&mut csv)?;
    write_file(&out, &csv)?;
    for f in &outcome.failures {
        eprintln!("unlabeled {}: {}", f.report_id, f.error);
    }
    println!(
        "labeled {} of {} reports with version {} ({} retries) -> {}",
        outcome.matrix.len(),
        cohort.len(),
        version.version_id,
        outcome.total_retries,
        out.display()
    );
    let failed = outcome.failures.len();
    if failed > 0 && failed as f64 / cohort.len() as f64 > cfg.run.max_failure_fraction {
        return Err(Failure::new(BACKEND, format!("{failed} of {} reports failed to label", cohort.len())));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// CSV `reader_id,report_id,<21 labels>` with cells 1, 0 or -1.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = DEFAULT_QUORUM)]
    quorum: usize,
    /// Defaults to `<workdir>/reference.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn aggregate(cfg: &CliConfig, args: AggregateArgs) -> CmdResult {
    let annotations = read_annotations_csv(open(&args.annotations)?)?;
    let reference = build_reference(&annotations, args.quorum)?;
    let out = args.out.unwrap_or_else(|| cfg.path(REFERENCE_FILE));
    let mut csv = Vec::new();
    reference.write_csv(&mut csv)?;
    write_file(&out, &csv)?;
    println!(
        "reference: {} reports, {} readers, quorum {} -> {}",
        reference.len(),
        reference.readers(),
        reference.quorum(),
        out.display()
    );
    let mut unresolved = PerLabel::from_fn(|_| 0usize);
    for (_, row) in reference.iter() {
        for label in LabelId::all() {
            if row[label.index()].as_bool().is_none() {
                unresolved[label] += 1;
            }
        }
    }
    let total: usize = unresolved.iter().map(|(_, n)| n).sum();
    println!("unresolved cells: {total}");
    for (label, n) in unresolved.iter().filter(|(_, n)| **n > 0) {
        println!("  {:<30}{n}", label.name());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    #[arg(long)]
    annotations: PathBuf,
}

pub fn agreement(args: AgreementArgs) -> CmdResult {
    let annotations = read_annotations_csv(open(&args.annotations)?)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "label,mean_kappa,defined_pairs,pairs")?;
    for label in LabelId::all() {
        let s = interrater_summary(&annotations, label)?;
        let defined = s.pairs.iter().filter(|p| p.kappa.is_some()).count();
        let mean = s.mean_kappa.map(fmt3).unwrap_or_else(|| "NA".into());
        writeln!(out, "{},{mean},{defined},{}", label.name(), s.pairs.len())?;
    }
    Ok(())
}

pub fn init_prompt(cfg: &CliConfig) -> CmdResult {
    let registry = load_registry(cfg)?;
    save_registry(cfg, &registry)?;
    println!("{} versions in {}", registry.versions().count(), registry_path(cfg).display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Parent version.
    #[arg(long)]
    from: u32,
    /// JSON array of revisions, e.g. `[{"kind":"SynonymAdded","label":"Edema","term":"fluid"}]`.
    #[arg(long)]
    revisions: Option<PathBuf>,
    /// `LABEL=TERM`
    #[arg(long = "synonym", value_name = "LABEL=TERM")]
    synonyms: Vec<String>,
    /// `LABEL=TEXT`
    #[arg(long = "clarify", value_name = "LABEL=TEXT")]
    clarifications: Vec<String>,
    #[arg(long = "exemplar-pos", value_name = "LABEL=TEXT")]
    positive: Vec<String>,
    #[arg(long = "exemplar-neg", value_name = "LABEL=TEXT")]
    negative: Vec<String>,
}

fn label_pair(arg: &str) -> Result<(LabelId, String), Failure> {
    let (name, text) = arg
        .split_once('=')
        .ok_or_else(|| Failure::validation(format!("{arg:?}: expected LABEL=TEXT")))?;
    let label = resolve_label(name).map_err(|e| Failure::validation(e.to_string()))?;
    Ok((label.id, text.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

pub fn refine(cfg: &CliConfig, args: RefineArgs) -> CmdResult {
    let mut revisions: Vec<Revision> = match &args.revisions {
        Some(path) => read_json(path)?,
        None => Vec::new(),
    };
    for arg in &args.synonyms {
        let (label, term) = label_pair(arg)?;
        revisions.push(Revision::SynonymAdded { label, term });
    }
    for arg in &args.clarifications {
        let (label, text) = label_pair(arg)?;
        revisions.push(Revision::ClarificationAdded { label, text });
    }
    for (args, polarity) in [(&args.positive, Polarity::Positive), (&args.negative, Polarity::Negative)] {
        for arg in args {
            let (label, text) = label_pair(arg)?;
            revisions.push(Revision::ExemplarAdded { label, polarity, text });
        }
    }
    let mut registry = load_registry(cfg)?;
    let created = registry.refine(args.from, &revisions)?.version_id;
    save_registry(cfg, &registry)?;
    println!("version {created} from {} ({} revisions)", args.from, revisions.len());
    Ok(())
}

pub fn freeze(cfg: &CliConfig, version: u32) -> CmdResult {
    let mut registry = load_registry(cfg)?;
    registry.freeze(version)?;
    save_registry(cfg, &registry)?;
    println!("version {version} frozen");
    Ok(())
}

pub fn prompts(cfg: &CliConfig) -> CmdResult {
    let registry = load_registry(cfg)?;
    println!("version  parent  frozen  note");
    for v in registry.versions() {
        let parent = v.parent_version.map_or("-".to_string(), |p| p.to_string());
        let frozen = if registry.is_frozen(v.version_id) { "yes" } else { "no" };
        println!("{:<9}{parent:<8}{frozen:<8}{}", v.version_id, v.change_note);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Reference CSV from `aggregate`; defaults to `<workdir>/reference.csv`.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "development")]
    cohort: String,
    /// Prompt version; defaults to the newest.
    #[arg(long)]
    version: Option<u32>,
    /// Exit 4 when any label fails the gate.
    #[arg(long)]
    strict: bool,
}

fn print_gate(run: &EvaluationRun) {
    let Some(gate) = &run.gate_result else { return };
    println!(
        "gate: {} of {} labels passed (accuracy >= {}, kappa >= {})",
        gate.passed_count(),
        gate.per_label.len(),
        gate.thresholds.accuracy,
        gate.thresholds.kappa
    );
    for g in gate.per_label.iter().filter(|g| !g.passed) {
        let acc = g.accuracy.map(fmt3).unwrap_or_else(|| "NA".into());
        let kappa = g.kappa_vs_reference.map(fmt3).unwrap_or_else(|| "NA".into());
        println!("  FAIL {:<30}accuracy {acc}  kappa {kappa}", g.label.name());
    }
}

fn print_run(run: &EvaluationRun, dir: &Path) {
    println!(
        "run {}  version {}  cohort {}  reports {}  unlabeled {}",
        run.run_id,
        run.prompt_version,
        run.cohort_tag,
        run.n_reports,
        run.failures.len()
    );
    println!(
        "macro F1 {}  micro F1 {}  micro accuracy {}",
        fmt3(run.metric_report.macro_avg.f1),
        fmt3(run.metric_report.micro.f1),
        fmt3(run.metric_report.micro.accuracy)
    );
    print_gate(run);
    println!("artifacts: {}", dir.display());
}

pub fn validate(cfg: &CliConfig, args: ValidateArgs) -> CmdResult {
    let corpus = load_corpus(&args.corpus.unwrap_or_else(|| cfg.path(CORPUS_FILE)))?;
    let cohort = select_cohort(&corpus, &args.cohort)?;
    let reference = load_reference(&args.reference.unwrap_or_else(|| cfg.path(REFERENCE_FILE)))?;
    let registry = load_registry(cfg)?;
    let version = registry.get(pick_version(&registry, args.version)?)?;
    let run = validate_labeler(backend(cfg)?.as_ref(), version, &cohort, &args.cohort, &reference, &cfg.run)?;
    let triage = triage_queue(&run, &cohort);
    let dir = store(cfg)?.write_run(&run, &triage)?;
    print_run(&run, &dir);
    println!("triage: {} cases", triage.len());
    if args.strict && !run.passed() {
        return Err(Failure::new(GATE, "gate failed"));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TriageArgs {
    #[arg(long)]
    run: String,
    /// Only cases for this label.
    #[arg(long)]
    label: Option<String>,
}

pub fn triage(cfg: &CliConfig, args: TriageArgs) -> CmdResult {
    let only = args
        .label
        .as_deref()
        .map(|l| resolve_label(l).map(|f| f.id).map_err(|e| Failure::validation(e.to_string())))
        .transpose()?;
    let cases = store(cfg)?.load_triage(&args.run)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "case_id\tlabel\tpredicted\treference\texcerpt")?;
    for c in cases.iter().filter(|c| only.is_none_or(|l| l == c.label)) {
        let excerpt = c.report_text_excerpt.replace(['\n', '\t'], " ");
        writeln!(out, "{}\t{}\t{}\t{}\t{excerpt}", c.case_id, c.label.name(), c.predicted, c.reference.code())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Directory with one subdirectory per model, each holding
    /// `reports.jsonl` or `reports.csv`.
    #[arg(long)]
    models: PathBuf,
    /// Reference reports (JSONL or CSV) with the same report ids.
    #[arg(long)]
    reference_reports: PathBuf,
    #[arg(long)]
    frozen_version: u32,
    #[arg(long, default_value = "test")]
    cohort: String,
}

fn model_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| io_err(root, e))? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let dir = entry.path();
        let file = ["reports.jsonl", "reports.csv"].iter().map(|f| dir.join(f)).find(|p| p.is_file());
        match file {
            Some(path) => out.push((entry.file_name().to_string_lossy().into_owned(), path)),
            None => eprintln!("skipping {}: no reports.jsonl or reports.csv", dir.display()),
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Failure::validation(format!("{}: no model directories", root.display())));
    }
    Ok(out)
}

pub fn benchmark(cfg: &CliConfig, args: BenchmarkArgs) -> CmdResult {
    let registry = load_registry(cfg)?;
    registry.get(args.frozen_version)?;
    if !registry.is_frozen(args.frozen_version) {
        return Err(HarnessError::FrozenVersionViolation(format!(
            "version {} must be frozen before benchmarking",
            args.frozen_version
        ))
        .into());
    }
    let (reference, _) = ingest_records(read_records(&args.reference_reports)?, &IngestOptions::default())?;
    let backend = backend(cfg)?;
    let store = store(cfg)?;
    let mut rows = Vec::new();
    for (model, path) in model_dirs(&args.models)? {
        let (outputs, _) = ingest_records(read_records(&path)?, &IngestOptions::default())?;
        let run = benchmark_generation(&outputs, &reference, backend.as_ref(), &registry, args.frozen_version, &model, &args.cohort, &cfg.run)?;
        store.write_run(&run, &[])?;
        eprintln!("{model}: run {}", run.run_id);
        rows.push(LeaderboardRow::from_report(&model, &run.metric_report, Some(run.run_id)));
    }
    let board = Leaderboard::new(rows);
    store.write_leaderboard(&board)?;
    print!("{}", board.to_markdown());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Baseline run id.
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
}

pub fn compare(cfg: &CliConfig, args: CompareArgs) -> CmdResult {
    let store = store(cfg)?;
    let cmp = compare_runs(&store.load_run(&args.a)?, &store.load_run(&args.b)?)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "label,f1_a,f1_b,delta_f1,only_a_correct,only_b_correct,p_value")?;
    for d in &cmp.per_label {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d.label.name(),
            fmt3(d.f1_a),
            fmt3(d.f1_b),
            fmt3(d.delta_f1),
            d.test.b,
            d.test.c,
            fmt3(d.test.p_value)
        )?;
    }
    writeln!(out, "macro delta F1 {}", fmt3(cmp.macro_delta_f1))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "development")]
    cohort: String,
    /// Starting version; defaults to the newest.
    #[arg(long)]
    version: Option<u32>,
    #[arg(long)]
    max_rounds: Option<u32>,
    /// JSON array of revision batches, one batch per failing round.
    #[arg(long)]
    revisions: Option<PathBuf>,
}

pub fn optimize(cfg: &CliConfig, args: OptimizeArgs) -> CmdResult {
    let corpus = load_corpus(&args.corpus.unwrap_or_else(|| cfg.path(CORPUS_FILE)))?;
    let cohort = select_cohort(&corpus, &args.cohort)?;
    let reference = load_reference(&args.reference.unwrap_or_else(|| cfg.path(REFERENCE_FILE)))?;
    let batches: Vec<Vec<Revision>> = match &args.revisions {
        Some(path) => read_json(path)?,
        None => Vec::new(),
    };
    let mut registry = load_registry(cfg)?;
    let start = pick_version(&registry, args.version)?;
    let backend = backend(cfg)?;
    let max_rounds = args.max_rounds.unwrap_or(cfg.max_rounds);
    let mut source = ScriptedRevisions::new(batches);
    let result = optimization_loop(
        &mut registry,
        backend.as_ref(),
        start,
        &cohort,
        &args.cohort,
        &reference,
        &cfg.run,
        max_rounds,
        &mut source,
    );
    let (outcome, failure) = match result {
        Ok(outcome) => (outcome, None),
        Err(HarnessError::MaxRoundsExceeded { rounds, outcome }) => {
            (*outcome, Some(Failure::new(GATE, format!("gate still failing after {rounds} rounds"))))
        }
        Err(e) => return Err(e.into()),
    };
    save_registry(cfg, &registry)?;
    let store = store(cfg)?;
    for (version, run) in outcome.lineage.iter().zip(&outcome.runs) {
        store.write_run(run, &triage_queue(run, &cohort))?;
        let gate = run.gate_result.as_ref().map_or(0, |g| g.passed_count());
        println!("version {version}  run {}  labels passing {gate}", run.run_id);
    }
    let (first, last) = (&outcome.runs[0], outcome.final_run());
    if outcome.runs.len() > 1 {
        let table = OptimizationTable::from_reports(&first.metric_report, &last.metric_report, &PerLabel::from_fn(|_| None));
        print!("{}", table.to_markdown());
    }
    println!("rounds {}  final run {}  passed {}", outcome.rounds, last.run_id, outcome.passed);
    failure.map_or(Ok(()), Err)
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

pub const SERVICE_TOKEN_ENV: &str = "CXRLAB_SERVICE_TOKEN";

pub fn serve(cfg: &CliConfig, args: ServeArgs) -> CmdResult {
    let config = cxrlab_service::ServiceConfig {
        root: cfg.workdir.clone(),
        token: std::env::var(SERVICE_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        run_config: cfg.run.clone(),
        default_max_rounds: cfg.max_rounds,
    };
    fs::create_dir_all(&cfg.workdir).map_err(|e| io_err(&cfg.workdir, e))?;
    let state = cxrlab_service::AppState::open(config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        cxrlab_service::serve(listener, state).await
    })?;
    Ok(())
}
