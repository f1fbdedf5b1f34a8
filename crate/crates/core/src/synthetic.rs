//! Seeded synthetic cohorts with known labels, for demos, tests and benches.
//!
//! Reports are assembled from one fixed sentence per finding, so the shipped
//! keyword labeler recovers the generating labels exactly. Prevalences are
//! skewed the way real chest X-ray corpora are: a few common findings and a
//! long tail of rare ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ingest, Corpus, CorpusError, IngestOptions, ReportRecord};
use crate::labeler::{LabelMatrix, LabelValues};
use crate::reference::{ReaderAnnotation, Vote};
use crate::taxonomy::{LabelId, PerLabel, LABEL_COUNT};

/// What a degenerate generator emits for every study.
pub const CONSTANT_NORMAL_REPORT: &str = "No acute findings.";

const NO_FINDING: usize = 7;

/// Positive sentence and prevalence per label, in canonical order.
const FINDINGS: [(&str, f64); LABEL_COUNT] = [
    ("Bibasilar atelectasis.", 0.15),
    ("Moderate cardiomegaly.", 0.12),
    ("Focal consolidation in the right lower lobe.", 0.05),
    ("Mild pulmonary edema.", 0.08),
    ("Widened mediastinum.", 0.05),
    ("Healing fracture of the left sixth rib.", 0.02),
    ("A 12 mm nodule in the right upper lobe.", 0.06),
    ("", 0.0),
    ("Small left pleural effusion.", 0.15),
    ("Apical pleural thickening.", 0.02),
    ("Patchy opacity at the right base.", 0.18),
    ("Findings concerning for pneumonia.", 0.06),
    ("Small right apical pneumothorax.", 0.03),
    ("Endotracheal tube terminates 4 cm above the carina.", 0.20),
    ("Hyperinflated lungs consistent with emphysema.", 0.03),
    ("Reticular changes compatible with pulmonary fibrosis.", 0.02),
    ("Calcified granuloma in the left mid lung.", 0.03),
    ("Bronchiectasis in the lower lobes.", 0.02),
    ("Thin-walled cavity in the left upper lobe.", 0.01),
    ("Right hilar enlargement.", 0.02),
    ("Pulmonary vascular congestion.", 0.04),
];

/// Negated statements used as filler for absent findings.
const NEGATIONS: [(usize, &str); 5] = [
    (12, "No pneumothorax."),
    (8, "No pleural effusion."),
    (2, "No focal consolidation."),
    (3, "No pulmonary edema."),
    (5, "No acute fracture."),
];

const NORMAL_TEXT: &str = "FINDINGS: The lungs are clear. No pleural effusion or pneumothorax. \
Heart size is normal.\nIMPRESSION: No acute cardiopulmonary process.";

pub fn positive_sentence(label: LabelId) -> Option<&'static str> {
    Some(FINDINGS[label.index()].0).filter(|s| !s.is_empty())
}

pub fn prevalence(label: LabelId) -> f64 {
    FINDINGS[label.index()].1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticReport {
    pub record: ReportRecord,
    pub truth: LabelValues,
}

/// Report text for a label assignment. No Finding is implied by the absence of
/// every other label and is ignored in `values`.
pub fn report_text(values: &LabelValues, rng: &mut impl Rng) -> String {
    let positives: Vec<LabelId> = values.positives().filter(|l| l.index() != NO_FINDING).collect();
    if positives.is_empty() {
        return NORMAL_TEXT.to_string();
    }
    let mut findings: Vec<&str> = positives.iter().filter_map(|l| positive_sentence(*l)).collect();
    for (label, sentence) in NEGATIONS {
        if !values.get(LabelId::new(label).expect("valid index")) && rng.random_bool(0.5) {
            findings.push(sentence);
        }
    }
    format!("FINDINGS: {}\nIMPRESSION: Findings as described above.", findings.join(" "))
}

fn draw_truth(rng: &mut impl Rng) -> LabelValues {
    let mut values = LabelValues::from_fn(|l| l.index() != NO_FINDING && rng.random_bool(prevalence(l)));
    if values.positives().next().is_none() {
        values.set(LabelId::new(NO_FINDING).expect("valid index"), true);
    }
    values
}

/// `n` reports with ids `S0000`, `S0001`, … and their generating labels.
pub fn synthetic_reports(n: usize, seed: u64) -> Vec<SyntheticReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let truth = draw_truth(&mut rng);
            let text = report_text(&truth, &mut rng);
            SyntheticReport {
                record: ReportRecord::new(format!("S{i:04}"), text),
                truth,
            }
        })
        .collect()
}

pub fn synthetic_cohort(n: usize, seed: u64) -> Result<(Corpus, LabelMatrix), CorpusError> {
    let reports = synthetic_reports(n, seed);
    let mut truth = LabelMatrix::new();
    for r in &reports {
        truth
            .insert(r.record.report_id.clone(), r.truth)
            .expect("generated ids are unique");
    }
    let (corpus, _) = ingest(reports.into_iter().map(|r| r.record), &IngestOptions::default())?;
    Ok((corpus, truth))
}

/// The same report ids with every text replaced by `text`.
pub fn constant_outputs(corpus: &Corpus, text: &str) -> Result<Corpus, CorpusError> {
    let records = corpus.reports().iter().map(|r| ReportRecord::new(r.report_id.clone(), text));
    Ok(ingest(records, &IngestOptions::default())?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReaderNoise {
    /// Chance a reader votes against the truth.
    pub flip: f64,
    /// Chance a reader abstains with -1.
    pub uncertain: f64,
}

impl Default for ReaderNoise {
    fn default() -> Self {
        Self {
            flip: 0.02,
            uncertain: 0.02,
        }
    }
}

/// Independent noisy readers `R1..=Rk` voting on every report and label.
pub fn simulate_readers(truth: &LabelMatrix, readers: usize, noise: ReaderNoise, seed: u64) -> Vec<ReaderAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(truth.len() * readers);
    for (report_id, values) in truth.iter() {
        for r in 1..=readers {
            let votes = PerLabel::from_fn(|label| {
                let draw: f64 = rng.random();
                let actual = values.get(label);
                if draw < noise.uncertain {
                    Vote::Uncertain
                } else if draw < noise.uncertain + noise.flip {
                    if actual { Vote::Absent } else { Vote::Present }
                } else if actual {
                    Vote::Present
                } else {
                    Vote::Absent
                }
            });
            out.push(ReaderAnnotation {
                reader_id: format!("R{r}"),
                report_id: report_id.to_string(),
                values: votes,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::rule_label;

    #[test]
    fn keyword_labeler_recovers_truth() {
        let (corpus, truth) = synthetic_cohort(500, 11).unwrap();
        for report in corpus.reports() {
            assert_eq!(
                &rule_label(report),
                truth.get(&report.report_id).unwrap(),
                "{}",
                report.raw_text
            );
        }
    }

    #[test]
    fn seeded_and_skewed() {
        assert_eq!(synthetic_reports(50, 3), synthetic_reports(50, 3));
        assert_ne!(synthetic_reports(50, 3), synthetic_reports(50, 4));
        let (_, truth) = synthetic_cohort(1000, 5).unwrap();
        let count = |i: usize| truth.iter().filter(|(_, v)| v.get(LabelId::new(i).unwrap())).count();
        assert!(count(NO_FINDING) > 150);
        assert!(count(18) < 40);
    }

    #[test]
    fn every_report_has_sections() {
        let (corpus, _) = synthetic_cohort(100, 1).unwrap();
        assert!(corpus.reports().iter().all(|r| r.has_sections()));
    }

    #[test]
    fn readers_are_noisy_but_close() {
        let (_, truth) = synthetic_cohort(40, 2).unwrap();
        let anns = simulate_readers(&truth, 6, ReaderNoise::default(), 9);
        assert_eq!(anns.len(), 240);
        let agree = anns
            .iter()
            .flat_map(|a| {
                let t = *truth.get(&a.report_id).unwrap();
                LabelId::all().map(move |l| (a.values[l] == Vote::Present) == t.get(l))
            })
            .filter(|ok| *ok)
            .count();
        assert!(agree as f64 / (240.0 * 21.0) > 0.94);
    }
}
