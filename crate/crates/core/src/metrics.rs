//! Exact statistics: Clopper-Pearson intervals, confusion metrics, Ran Score
//! and the exact McNemar test.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::labeler::LabelMatrix;
use crate::reference::{cohen_kappa_binary, ReferenceStandard, ReferenceState};
use crate::taxonomy::{LabelId, LABEL_COUNT};

/// Bisection stops once the bracket is narrower than this.
pub const CP_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("no prediction for report {0:?}")]
    MissingPrediction(String),
    #[error("report sets differ: {only_left} only in generated, {only_right} only in reference (first: {example:?})")]
    ReportSetMismatch {
        only_left: usize,
        only_right: usize,
        example: String,
    },
}

fn ln_binomial_terms(n: u64, p: f64) -> impl Iterator<Item = f64> {
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut ln_choose = 0.0;
    (0..=n).map(move |k| {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let a = if k == 0 { 0.0 } else { kf * lp };
        let b = if k == n { 0.0 } else { (n - k) as f64 * lq };
        ln_choose + a + b
    })
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// P[Bin(n, p) ≤ x], summed in log space.
pub fn binomial_cdf(x: u64, n: u64, p: f64) -> f64 {
    if x >= n {
        return 1.0;
    }
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let terms: Vec<f64> = ln_binomial_terms(n, p).take(x as usize + 1).collect();
    log_sum_exp(&terms).exp().min(1.0)
}

/// P[Bin(n, p) ≥ x].
fn binomial_upper_tail(x: u64, n: u64, p: f64) -> f64 {
    if x == 0 {
        return 1.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let terms: Vec<f64> = ln_binomial_terms(n, p).skip(x as usize).collect();
    log_sum_exp(&terms).exp().min(1.0)
}

/// Root of a monotone `f` on [0, 1]; `increasing` gives its direction.
fn bisect(target: f64, increasing: bool, f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > CP_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        let below = f(mid) < target;
        if below == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact two-sided binomial interval for `x` successes in `n` trials.
pub fn clopper_pearson(x: u64, n: u64, alpha: f64) -> Result<(f64, f64), MetricError> {
    if n == 0 {
        return Err(MetricError::DomainError("n must be at least 1".into()));
    }
    if x > n {
        return Err(MetricError::DomainError(format!("x = {x} exceeds n = {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricError::DomainError(format!("alpha = {alpha} outside (0, 1)")));
    }
    let half = alpha / 2.0;
    let lower = if x == 0 {
        0.0
    } else {
        bisect(half, true, |p| binomial_upper_tail(x, n, p))
    };
    let upper = if x == n {
        1.0
    } else {
        bisect(half, false, |p| binomial_cdf(x, n, p))
    };
    Ok((lower, upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: u64,
    pub x: u64,
    pub alpha: f64,
}

impl IntervalEstimate {
    pub fn new(x: u64, n: u64, alpha: f64) -> Result<Self, MetricError> {
        let (lower, upper) = clopper_pearson(x, n, alpha)?;
        let point = x as f64 / n as f64;
        Ok(Self {
            point,
            lower: lower.min(point),
            upper: upper.max(point),
            n,
            x,
            alpha,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn errors(&self) -> u64 {
        self.fp + self.fn_
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), |a, b| a + b)
    }
}

/// Precision, recall and F1; a 0/0 yields 0 and sets the matching flag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub f1_degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn prf1(c: Confusion) -> Prf1 {
    let (precision, precision_degenerate) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_degenerate) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f1_degenerate) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    Prf1 {
        precision,
        recall,
        f1,
        precision_degenerate,
        recall_degenerate,
        f1_degenerate,
    }
}

/// Confusion for one label over the resolved cells of `reference`.
pub fn confusion(
    pred: &LabelMatrix,
    reference: &ReferenceStandard,
    label: LabelId,
) -> Result<Confusion, MetricError> {
    let mut c = Confusion::default();
    for (id, row) in reference.iter() {
        let values = pred
            .get(id)
            .ok_or_else(|| MetricError::MissingPrediction(id.to_string()))?;
        if let Some(actual) = row[label.index()].as_bool() {
            c.record(values.get(label), actual);
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: LabelId,
    pub confusion: Confusion,
    /// `None` when every reference cell for the label is Unresolved.
    pub accuracy: Option<IntervalEstimate>,
    #[serde(flatten)]
    pub scores: Prf1,
    /// Cohen's kappa between predictions and resolved reference cells.
    pub kappa: Option<f64>,
}

impl LabelMetrics {
    pub fn accuracy_point(&self) -> f64 {
        self.accuracy.map_or(0.0, |a| a.point)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_label: Vec<LabelMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub micro: Averages,
    pub included_labels: BTreeSet<LabelId>,
    pub excluded_labels: BTreeSet<LabelId>,
    pub pooled: Confusion,
    pub n_reports: usize,
    pub alpha: f64,
}

impl MetricReport {
    pub fn label(&self, label: LabelId) -> &LabelMetrics {
        &self.per_label[label.index()]
    }

    /// Macro F1; for a generation benchmark this is the Ran Score.
    pub fn macro_f1(&self) -> f64 {
        self.macro_avg.f1
    }

    pub fn from_confusions(
        confusions: [Confusion; LABEL_COUNT],
        kappas: [Option<f64>; LABEL_COUNT],
        n_reports: usize,
        alpha: f64,
    ) -> Result<Self, MetricError> {
        let mut per_label = Vec::with_capacity(LABEL_COUNT);
        let mut included = BTreeSet::new();
        let mut excluded = BTreeSet::new();
        for label in LabelId::all() {
            let c = confusions[label.index()];
            let accuracy = match c.total() {
                0 => None,
                n => Some(IntervalEstimate::new(c.correct(), n, alpha)?),
            };
            if c.support() == 0 && c.predicted_positive() == 0 {
                excluded.insert(label);
            } else {
                included.insert(label);
            }
            per_label.push(LabelMetrics {
                label,
                confusion: c,
                accuracy,
                scores: prf1(c),
                kappa: kappas[label.index()],
            });
        }

        let k = included.len() as f64;
        let mean = |f: &dyn Fn(&LabelMetrics) -> f64| -> f64 {
            if included.is_empty() {
                0.0
            } else {
                included.iter().map(|l| f(&per_label[l.index()])).sum::<f64>() / k
            }
        };
        let macro_avg = Averages {
            accuracy: mean(&|m| m.accuracy_point()),
            precision: mean(&|m| m.scores.precision),
            recall: mean(&|m| m.scores.recall),
            f1: mean(&|m| m.scores.f1),
        };

        let pooled: Confusion = confusions.iter().copied().sum();
        let pooled_scores = prf1(pooled);
        let micro = Averages {
            accuracy: ratio(pooled.correct(), pooled.total()).0,
            precision: pooled_scores.precision,
            recall: pooled_scores.recall,
            f1: pooled_scores.f1,
        };
        if !excluded.is_empty() {
            tracing::info!(
                excluded = ?excluded.iter().map(|l| l.name()).collect::<Vec<_>>(),
                "labels without support or predictions left out of the macro mean"
            );
        }
        Ok(Self {
            per_label,
            macro_avg,
            micro,
            included_labels: included,
            excluded_labels: excluded,
            pooled,
            n_reports,
            alpha,
        })
    }
}

/// Per-label and averaged metrics of `pred` against the resolved reference cells.
pub fn metric_report(
    pred: &LabelMatrix,
    reference: &ReferenceStandard,
) -> Result<MetricReport, MetricError> {
    metric_report_with_alpha(pred, reference, DEFAULT_ALPHA)
}

pub fn metric_report_with_alpha(
    pred: &LabelMatrix,
    reference: &ReferenceStandard,
    alpha: f64,
) -> Result<MetricReport, MetricError> {
    if let Some(missing) = reference.report_ids().iter().find(|id| !pred.contains(id)) {
        return Err(MetricError::MissingPrediction(missing.clone()));
    }
    let mut confusions = [Confusion::default(); LABEL_COUNT];
    let mut kappas = [None; LABEL_COUNT];
    for label in LabelId::all() {
        let (mut p, mut r) = (Vec::new(), Vec::new());
        for (id, actual) in reference.resolved(label) {
            let predicted = pred.get(id).expect("checked above").get(label);
            confusions[label.index()].record(predicted, actual);
            p.push(predicted);
            r.push(actual);
        }
        kappas[label.index()] = cohen_kappa_binary(&p, &r).ok();
    }
    MetricReport::from_confusions(confusions, kappas, reference.len(), alpha)
}

/// Macro F1 of generated-report labels against reference-report labels,
/// both extracted by the same labeler.
pub fn ran_score(gen: &LabelMatrix, reference: &LabelMatrix) -> Result<(f64, MetricReport), MetricError> {
    check_same_reports(gen, reference)?;
    let standard = ReferenceStandard::from_binary(reference);
    let report = metric_report(gen, &standard)?;
    Ok((report.macro_f1(), report))
}

pub(crate) fn check_same_reports(a: &LabelMatrix, b: &LabelMatrix) -> Result<(), MetricError> {
    let only_left: Vec<&String> = a.report_ids().iter().filter(|id| !b.contains(id)).collect();
    let only_right: Vec<&String> = b.report_ids().iter().filter(|id| !a.contains(id)).collect();
    if only_left.is_empty() && only_right.is_empty() {
        return Ok(());
    }
    Err(MetricError::ReportSetMismatch {
        only_left: only_left.len(),
        only_right: only_right.len(),
        example: only_left.first().or(only_right.first()).map(|s| s.to_string()).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Cells where only the first predictor is correct.
    pub b: u64,
    /// Cells where only the second predictor is correct.
    pub c: u64,
    pub p_value: f64,
    pub no_discordance: bool,
}

/// Two-sided exact McNemar p-value for discordant counts `b` and `c`.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 || b == c {
        return 1.0;
    }
    (2.0 * binomial_cdf(b.min(c), n, 0.5)).min(1.0)
}

/// Exact McNemar test on per-report correctness of two predictors for one label.
pub fn paired_test(
    pred_a: &LabelMatrix,
    pred_b: &LabelMatrix,
    reference: &ReferenceStandard,
    label: LabelId,
) -> Result<PairedTest, MetricError> {
    let (mut b, mut c) = (0, 0);
    for (id, row) in reference.iter() {
        let a_row = pred_a.get(id).ok_or_else(|| MetricError::MissingPrediction(id.to_string()))?;
        let b_row = pred_b.get(id).ok_or_else(|| MetricError::MissingPrediction(id.to_string()))?;
        let actual = match row[label.index()] {
            ReferenceState::Unresolved => continue,
            s => s == ReferenceState::Positive,
        };
        match (a_row.get(label) == actual, b_row.get(label) == actual) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(PairedTest {
        b,
        c,
        p_value: mcnemar_exact(b, c),
        no_discordance: b + c == 0,
    })
}
