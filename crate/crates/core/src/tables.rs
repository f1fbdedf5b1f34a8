//! CSV and Markdown emitters for accuracy, optimisation and leaderboard tables.
//!
//! All values are rounded to three decimals on output only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{IntervalEstimate, MetricReport};
use crate::taxonomy::{canonical_labels, LabelId, PerLabel, LABEL_COUNT};

pub fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// `0.987 [0.966, 0.996]`
pub fn accuracy_cell(est: &IntervalEstimate) -> String {
    format!("{} [{}, {}]", fmt3(est.point), fmt3(est.lower), fmt3(est.upper))
}

fn csv_line(cells: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(cells).expect("writing to memory");
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf8 input")
}

fn markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let rule: Vec<&str> = header
        .iter()
        .enumerate()
        .map(|(i, _)| if i == 0 { "---" } else { "---:" })
        .collect();
    let _ = writeln!(out, "| {} |", rule.join(" | "));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

fn csv_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = csv_line(header);
    for row in rows {
        out.push_str(&csv_line(row));
    }
    out
}

/// Per-label accuracy with confidence intervals, one column per model.
#[derive(Debug, Clone)]
pub struct AccuracyTable {
    pub models: Vec<String>,
    pub cells: Vec<[Option<IntervalEstimate>; LABEL_COUNT]>,
}

impl AccuracyTable {
    pub fn new<'a>(reports: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> Self {
        let mut models = Vec::new();
        let mut cells = Vec::new();
        for (model, report) in reports {
            models.push(model.to_string());
            let mut column = [None; LABEL_COUNT];
            for m in &report.per_label {
                column[m.label.index()] = m.accuracy;
            }
            cells.push(column);
        }
        Self { models, cells }
    }

    fn grid(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["Label".to_string()];
        header.extend(self.models.iter().cloned());
        let rows = LabelId::all()
            .map(|l| {
                let mut row = vec![l.name().to_string()];
                row.extend(
                    self.cells
                        .iter()
                        .map(|c| c[l.index()].as_ref().map_or("-".into(), accuracy_cell)),
                );
                row
            })
            .collect();
        (header, rows)
    }

    pub fn to_csv(&self) -> String {
        let (h, r) = self.grid();
        csv_table(&h, &r)
    }

    pub fn to_markdown(&self) -> String {
        let (h, r) = self.grid();
        markdown(&h, &r)
    }
}

const METRIC_COLUMNS: [&str; 14] = [
    "label", "n", "tp", "fp", "fn", "tn", "accuracy", "ci_lower", "ci_upper", "precision",
    "recall", "f1", "kappa", "in_macro",
];

fn opt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), fmt3)
}

fn metric_rows(report: &MetricReport) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = report
        .per_label
        .iter()
        .map(|m| {
            let c = m.confusion;
            vec![
                m.label.name().to_string(),
                c.total().to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
                opt3(m.accuracy.map(|a| a.point)),
                opt3(m.accuracy.map(|a| a.lower)),
                opt3(m.accuracy.map(|a| a.upper)),
                fmt3(m.scores.precision),
                fmt3(m.scores.recall),
                fmt3(m.scores.f1),
                opt3(m.kappa),
                report.included_labels.contains(&m.label).to_string(),
            ]
        })
        .collect();
    for (name, avg, confusion) in [
        ("Macro", report.macro_avg, None),
        ("Micro", report.micro, Some(report.pooled)),
    ] {
        let c = confusion.map(|c| [c.total(), c.tp, c.fp, c.fn_, c.tn].map(|v| v.to_string()));
        let mut row = vec![name.to_string()];
        row.extend(c.unwrap_or_else(|| std::array::from_fn(|_| "-".to_string())));
        row.extend([fmt3(avg.accuracy), "-".into(), "-".into()]);
        row.extend([fmt3(avg.precision), fmt3(avg.recall), fmt3(avg.f1), "-".into(), "-".into()]);
        rows.push(row);
    }
    rows
}

/// Full per-label breakdown of one report, followed by macro and micro rows.
pub fn metrics_csv(report: &MetricReport) -> String {
    let header: Vec<String> = METRIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    csv_table(&header, &metric_rows(report))
}

pub fn metrics_markdown(report: &MetricReport) -> String {
    let header: Vec<String> = METRIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut out = markdown(&header, &metric_rows(report));
    if !report.excluded_labels.is_empty() {
        let names: Vec<&str> = report.excluded_labels.iter().map(|l| l.name()).collect();
        let _ = writeln!(
            out,
            "\nExcluded from macro mean (no reference positives and no predicted positives): {}",
            names.join(", ")
        );
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LabelScores {
    fn from_report(report: &MetricReport, label: LabelId) -> Self {
        let m = report.label(label);
        Self {
            accuracy: m.accuracy_point(),
            precision: m.scores.precision,
            recall: m.scores.recall,
            f1: m.scores.f1,
        }
    }

    fn mean<'a>(items: impl Iterator<Item = &'a LabelScores>) -> Self {
        let mut sum = LabelScores::default();
        let mut n = 0.0;
        for s in items {
            sum.accuracy += s.accuracy;
            sum.precision += s.precision;
            sum.recall += s.recall;
            sum.f1 += s.f1;
            n += 1.0;
        }
        if n == 0.0 {
            return sum;
        }
        Self {
            accuracy: sum.accuracy / n,
            precision: sum.precision / n,
            recall: sum.recall / n,
            f1: sum.f1 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRow {
    pub label: LabelId,
    pub pre: LabelScores,
    pub post: LabelScores,
    /// External comparator F1; only set for CheXbert-comparable labels.
    pub chexbert_f1: Option<f64>,
}

impl OptimizationRow {
    pub fn delta_f1(&self) -> f64 {
        self.post.f1 - self.pre.f1
    }

    pub fn chexbert_delta(&self) -> Option<f64> {
        self.chexbert_f1.map(|c| self.post.f1 - c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizationAverage {
    pub pre: LabelScores,
    pub post: LabelScores,
    pub delta_f1: f64,
    pub chexbert_f1: Option<f64>,
    pub chexbert_delta: Option<f64>,
}

/// Pre/post prompt-optimisation comparison with an optional CheXbert column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTable {
    pub rows: Vec<OptimizationRow>,
}

impl OptimizationTable {
    /// CheXbert values given for non-comparable labels are dropped.
    pub fn new(pre: &PerLabel<LabelScores>, post: &PerLabel<LabelScores>, chexbert: &PerLabel<Option<f64>>) -> Self {
        let comparable = |l: LabelId| canonical_labels()[l.index()].chexbert_comparable;
        let rows = LabelId::all()
            .map(|label| OptimizationRow {
                label,
                pre: pre[label],
                post: post[label],
                chexbert_f1: chexbert[label].filter(|_| comparable(label)),
            })
            .collect();
        Self { rows }
    }

    pub fn from_reports(pre: &MetricReport, post: &MetricReport, chexbert: &PerLabel<Option<f64>>) -> Self {
        Self::new(
            &PerLabel::from_fn(|l| LabelScores::from_report(pre, l)),
            &PerLabel::from_fn(|l| LabelScores::from_report(post, l)),
            chexbert,
        )
    }

    /// Pre/post means over all labels; CheXbert means over labels that carry a value.
    pub fn average(&self) -> OptimizationAverage {
        let pre = LabelScores::mean(self.rows.iter().map(|r| &r.pre));
        let post = LabelScores::mean(self.rows.iter().map(|r| &r.post));
        let chex: Vec<&OptimizationRow> = self.rows.iter().filter(|r| r.chexbert_f1.is_some()).collect();
        let mean = |f: &dyn Fn(&OptimizationRow) -> f64| {
            (!chex.is_empty()).then(|| chex.iter().map(|r| f(r)).sum::<f64>() / chex.len() as f64)
        };
        OptimizationAverage {
            pre,
            post,
            delta_f1: post.f1 - pre.f1,
            chexbert_f1: mean(&|r| r.chexbert_f1.unwrap_or_default()),
            chexbert_delta: mean(&|r| r.chexbert_delta().unwrap_or_default()),
        }
    }

    fn grid(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header: Vec<String> = [
            "Label", "Accuracy pre", "Accuracy post", "Precision pre", "Precision post",
            "Recall pre", "Recall post", "F1 pre", "F1 post", "Delta F1", "CheXbert F1",
            "Delta F1 vs CheXbert",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let cells = |name: String, pre: &LabelScores, post: &LabelScores, d: f64, c: Option<f64>, cd: Option<f64>| {
            vec![
                name,
                fmt3(pre.accuracy),
                fmt3(post.accuracy),
                fmt3(pre.precision),
                fmt3(post.precision),
                fmt3(pre.recall),
                fmt3(post.recall),
                fmt3(pre.f1),
                fmt3(post.f1),
                fmt3(d),
                opt3(c),
                opt3(cd),
            ]
        };
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| cells(r.label.name().into(), &r.pre, &r.post, r.delta_f1(), r.chexbert_f1, r.chexbert_delta()))
            .collect();
        let avg = self.average();
        rows.push(cells("Average".into(), &avg.pre, &avg.post, avg.delta_f1, avg.chexbert_f1, avg.chexbert_delta));
        (header, rows)
    }

    pub fn to_csv(&self) -> String {
        let (h, r) = self.grid();
        csv_table(&h, &r)
    }

    pub fn to_markdown(&self) -> String {
        let (h, r) = self.grid();
        markdown(&h, &r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub model: String,
    pub micro_accuracy: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// The Ran Score.
    pub macro_f1: f64,
    pub run_id: Option<String>,
}

impl LeaderboardRow {
    pub fn from_report(model: &str, report: &MetricReport, run_id: Option<String>) -> Self {
        Self {
            model: model.to_string(),
            micro_accuracy: report.micro.accuracy,
            micro_precision: report.micro.precision,
            micro_recall: report.micro.recall,
            micro_f1: report.micro.f1,
            macro_precision: report.macro_avg.precision,
            macro_recall: report.macro_avg.recall,
            macro_f1: report.macro_avg.f1,
            run_id,
        }
    }
}

const LEADERBOARD_COLUMNS: [&str; 8] = [
    "model",
    "micro_accuracy",
    "micro_precision",
    "micro_recall",
    "micro_f1",
    "macro_precision",
    "macro_recall",
    "macro_f1",
];

/// Generation-model comparison with micro and macro blocks, sorted by Ran Score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub rows: Vec<LeaderboardRow>,
}

impl Leaderboard {
    pub fn new(mut rows: Vec<LeaderboardRow>) -> Self {
        rows.sort_by(|a, b| b.macro_f1.total_cmp(&a.macro_f1).then_with(|| a.model.cmp(&b.model)));
        Self { rows }
    }

    fn cells(row: &LeaderboardRow) -> Vec<String> {
        vec![
            row.model.clone(),
            fmt3(row.micro_accuracy),
            fmt3(row.micro_precision),
            fmt3(row.micro_recall),
            fmt3(row.micro_f1),
            fmt3(row.macro_precision),
            fmt3(row.macro_recall),
            fmt3(row.macro_f1),
        ]
    }

    pub fn to_csv(&self) -> String {
        let header: Vec<String> = LEADERBOARD_COLUMNS.iter().map(|s| s.to_string()).collect();
        let rows: Vec<_> = self.rows.iter().map(Self::cells).collect();
        csv_table(&header, &rows)
    }

    pub fn to_markdown(&self) -> String {
        let header: Vec<String> = [
            "Model",
            "Micro Accuracy",
            "Micro Precision",
            "Micro Recall",
            "Micro F1",
            "Macro Precision",
            "Macro Recall",
            "Macro F1 (Ran Score)",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let rows: Vec<_> = self.rows.iter().map(Self::cells).collect();
        markdown(&header, &rows)
    }
}
