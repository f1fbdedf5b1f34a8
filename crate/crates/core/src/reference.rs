//! Majority-vote reference standards and inter-rater agreement.
//!
//! Each reader votes 1 (present), 0 (absent) or -1 (uncertain) per label.
//! A cell resolves to Positive or Negative when at least `quorum` readers cast
//! that vote. Uncertain votes support neither side and never lower the quorum,
//! so with six readers and quorum four, `[1,1,1,-1,-1,-1]` stays Unresolved.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::labeler::{label_columns, LabelMatrix};
use crate::taxonomy::{canonical_labels, LabelId, PerLabel, LABEL_COUNT};

pub const DEFAULT_QUORUM: usize = 4;
pub const DEFAULT_READERS: usize = 6;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ReferenceError {
    #[error("vote {0} is not one of 1, 0, -1")]
    BadVote(i64),
    #[error("quorum {quorum} is not a strict majority of {readers} readers")]
    InvalidQuorum { quorum: usize, readers: usize },
    #[error("report {report_id:?} has no annotation from reader {reader_id:?}")]
    MissingReader { report_id: String, reader_id: String },
    #[error("reader {reader_id:?} annotated report {report_id:?} more than once")]
    DuplicateReader { report_id: String, reader_id: String },
    #[error("no annotations given")]
    NoAnnotations,
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no pair left after dropping uncertain votes")]
    NoOverlap,
    #[error("at least two readers are needed, found {0}")]
    TooFewReaders(usize),
    #[error("annotation CSV must have header reader_id,report_id followed by all {LABEL_COUNT} labels")]
    BadHeader,
    #[error("reference CSV must have header report_id followed by all {LABEL_COUNT} labels")]
    BadReferenceHeader,
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for ReferenceError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}

/// One reader's judgment on one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Vote {
    Present,
    Absent,
    Uncertain,
}

impl Vote {
    pub fn as_i64(self) -> i64 {
        match self {
            Vote::Present => 1,
            Vote::Absent => 0,
            Vote::Uncertain => -1,
        }
    }
}

impl TryFrom<i64> for Vote {
    type Error = ReferenceError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Vote::Present),
            0 => Ok(Vote::Absent),
            -1 => Ok(Vote::Uncertain),
            other => Err(ReferenceError::BadVote(other)),
        }
    }
}

impl From<Vote> for i64 {
    fn from(v: Vote) -> i64 {
        v.as_i64()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderAnnotation {
    pub reader_id: String,
    pub report_id: String,
    pub values: PerLabel<Vote>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReferenceState {
    Positive,
    Negative,
    Unresolved,
}

impl ReferenceState {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Self::Positive => Some(true),
            Self::Negative => Some(false),
            Self::Unresolved => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::Positive => "1",
            Self::Negative => "0",
            Self::Unresolved => "U",
        }
    }
}

fn check_quorum(quorum: usize, readers: usize) -> Result<(), ReferenceError> {
    if quorum == 0 || quorum > readers || 2 * quorum <= readers {
        return Err(ReferenceError::InvalidQuorum { quorum, readers });
    }
    Ok(())
}

/// Resolve one cell from raw reader votes (each 1, 0 or -1).
pub fn aggregate(votes: &[i64], quorum: usize) -> Result<ReferenceState, ReferenceError> {
    check_quorum(quorum, votes.len())?;
    let mut present = 0;
    let mut absent = 0;
    for &v in votes {
        match Vote::try_from(v)? {
            Vote::Present => present += 1,
            Vote::Absent => absent += 1,
            Vote::Uncertain => {}
        }
    }
    Ok(resolve_counts(present, absent, quorum))
}

fn resolve_counts(present: usize, absent: usize, quorum: usize) -> ReferenceState {
    if present >= quorum {
        ReferenceState::Positive
    } else if absent >= quorum {
        ReferenceState::Negative
    } else {
        ReferenceState::Unresolved
    }
}

/// Per report and label: one of Positive, Negative, Unresolved.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceStandard {
    quorum: usize,
    readers: usize,
    report_ids: Vec<String>,
    cells: Vec<[ReferenceState; LABEL_COUNT]>,
    index: HashMap<String, usize>,
}

impl ReferenceStandard {
    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn readers(&self) -> usize {
        self.readers
    }

    pub fn report_ids(&self) -> &[String] {
        &self.report_ids
    }

    pub fn len(&self) -> usize {
        self.report_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.report_ids.is_empty()
    }

    pub fn contains(&self, report_id: &str) -> bool {
        self.index.contains_key(report_id)
    }

    pub fn state(&self, report_id: &str, label: LabelId) -> Option<ReferenceState> {
        self.index.get(report_id).map(|&i| self.cells[i][label.index()])
    }

    pub fn row(&self, report_id: &str) -> Option<&[ReferenceState; LABEL_COUNT]> {
        self.index.get(report_id).map(|&i| &self.cells[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[ReferenceState; LABEL_COUNT])> {
        self.report_ids.iter().map(String::as_str).zip(&self.cells)
    }

    /// Build directly from resolved cells (e.g. a re-imported CSV).
    pub fn from_cells(
        rows: impl IntoIterator<Item = (String, [ReferenceState; LABEL_COUNT])>,
        quorum: usize,
        readers: usize,
    ) -> Result<Self, ReferenceError> {
        let mut out = Self {
            quorum,
            readers,
            report_ids: Vec::new(),
            cells: Vec::new(),
            index: HashMap::new(),
        };
        for (id, row) in rows {
            if out.index.insert(id.clone(), out.cells.len()).is_some() {
                return Err(ReferenceError::BadRow {
                    row: out.cells.len() + 1,
                    message: format!("duplicate report {id:?}"),
                });
            }
            out.report_ids.push(id);
            out.cells.push(row);
        }
        Ok(out)
    }

    /// A fully resolved standard from binary labels (no Unresolved cells).
    pub fn from_binary(labels: &LabelMatrix) -> Self {
        let rows = labels.iter().map(|(id, values)| {
            let mut row = [ReferenceState::Negative; LABEL_COUNT];
            for label in values.positives() {
                row[label.index()] = ReferenceState::Positive;
            }
            (id.to_string(), row)
        });
        Self::from_cells(rows, 1, 1).expect("label matrix ids are unique")
    }

    /// Subset of rows, in the order given; unknown ids are skipped.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let rows: Vec<_> = ids
            .into_iter()
            .filter_map(|id| self.row(id).map(|row| (id.to_string(), *row)))
            .collect();
        Self::from_cells(rows, self.quorum, self.readers).expect("subset ids are unique")
    }

    /// Binary ground truth for the resolved cells of one label.
    pub fn resolved(&self, label: LabelId) -> impl Iterator<Item = (&str, bool)> {
        self.iter()
            .filter_map(move |(id, row)| row[label.index()].as_bool().map(|b| (id, b)))
    }

    /// CSV `report_id,<21 labels>` with cells 1, 0 or U.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ReferenceError> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["report_id"];
        header.extend(canonical_labels().iter().map(|l| l.canonical_name.as_str()));
        writer.write_record(&header)?;
        for (id, row) in self.iter() {
            let mut record = vec![id];
            record.extend(row.iter().map(|s| s.code()));
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|e| ReferenceError::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, ReferenceError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = reader.headers()?.clone();
        if header.get(0) != Some("report_id") {
            return Err(ReferenceError::BadReferenceHeader);
        }
        let columns = label_columns(&header, 1).ok_or(ReferenceError::BadReferenceHeader)?;
        let mut rows = Vec::new();
        for (n, record) in reader.records().enumerate() {
            let record = record?;
            let mut row = [ReferenceState::Unresolved; LABEL_COUNT];
            for (col, label) in columns.iter().enumerate() {
                row[label.index()] = match record.get(col + 1).unwrap_or_default() {
                    "1" => ReferenceState::Positive,
                    "0" => ReferenceState::Negative,
                    "U" | "u" => ReferenceState::Unresolved,
                    other => {
                        return Err(ReferenceError::BadRow {
                            row: n + 1,
                            message: format!("{}: {other:?} is not 1, 0 or U", label.name()),
                        })
                    }
                };
            }
            rows.push((record.get(0).unwrap_or_default().to_string(), row));
        }
        Self::from_cells(rows, DEFAULT_QUORUM, DEFAULT_READERS)
    }
}

/// Cell-wise majority vote over all reports. Every report needs exactly one
/// annotation from every reader that appears anywhere in `annotations`.
pub fn build_reference(
    annotations: &[ReaderAnnotation],
    quorum: usize,
) -> Result<ReferenceStandard, ReferenceError> {
    if annotations.is_empty() {
        return Err(ReferenceError::NoAnnotations);
    }
    let readers: BTreeSet<&str> = annotations.iter().map(|a| a.reader_id.as_str()).collect();
    check_quorum(quorum, readers.len())?;

    let mut report_order: Vec<&str> = Vec::new();
    let mut by_report: HashMap<&str, HashMap<&str, &ReaderAnnotation>> = HashMap::new();
    for a in annotations {
        let entry = by_report.entry(a.report_id.as_str()).or_insert_with(|| {
            report_order.push(a.report_id.as_str());
            HashMap::new()
        });
        if entry.insert(a.reader_id.as_str(), a).is_some() {
            return Err(ReferenceError::DuplicateReader {
                report_id: a.report_id.clone(),
                reader_id: a.reader_id.clone(),
            });
        }
    }

    let mut rows = Vec::with_capacity(report_order.len());
    for report_id in report_order {
        let votes = &by_report[report_id];
        if let Some(missing) = readers.iter().find(|r| !votes.contains_key(*r)) {
            return Err(ReferenceError::MissingReader {
                report_id: report_id.to_string(),
                reader_id: missing.to_string(),
            });
        }
        let mut row = [ReferenceState::Unresolved; LABEL_COUNT];
        for label in LabelId::all() {
            let (mut present, mut absent) = (0, 0);
            for a in votes.values() {
                match a.values[label] {
                    Vote::Present => present += 1,
                    Vote::Absent => absent += 1,
                    Vote::Uncertain => {}
                }
            }
            row[label.index()] = resolve_counts(present, absent, quorum);
        }
        rows.push((report_id.to_string(), row));
    }
    ReferenceStandard::from_cells(rows, quorum, readers.len())
}

/// Cohen's kappa between two raters over 0/1 votes; pairs with a -1 on either
/// side are dropped first. When chance agreement is 1 (both raters use a single
/// class) the result is 1 for identical sequences and 0 otherwise.
pub fn cohen_kappa(a: &[i64], b: &[i64]) -> Result<f64, ReferenceError> {
    if a.len() != b.len() {
        return Err(ReferenceError::LengthMismatch(a.len(), b.len()));
    }
    let mut table = [[0usize; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (Vote::try_from(x)?, Vote::try_from(y)?);
        if x == Vote::Uncertain || y == Vote::Uncertain {
            continue;
        }
        table[(x == Vote::Present) as usize][(y == Vote::Present) as usize] += 1;
    }
    kappa_from_table(&table)
}

/// Kappa for two binary sequences of equal length.
pub fn cohen_kappa_binary(a: &[bool], b: &[bool]) -> Result<f64, ReferenceError> {
    if a.len() != b.len() {
        return Err(ReferenceError::LengthMismatch(a.len(), b.len()));
    }
    let mut table = [[0usize; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize][y as usize] += 1;
    }
    kappa_from_table(&table)
}

fn kappa_from_table(table: &[[usize; 2]; 2]) -> Result<f64, ReferenceError> {
    let n = (table[0][0] + table[0][1] + table[1][0] + table[1][1]) as f64;
    if n == 0.0 {
        return Err(ReferenceError::NoOverlap);
    }
    let observed = (table[0][0] + table[1][1]) as f64 / n;
    let a1 = (table[1][0] + table[1][1]) as f64 / n;
    let b1 = (table[0][1] + table[1][1]) as f64 / n;
    let expected = a1 * b1 + (1.0 - a1) * (1.0 - b1);
    if expected >= 1.0 {
        let identical = table[0][1] == 0 && table[1][0] == 0;
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok((observed - expected) / (1.0 - expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub reader_a: String,
    pub reader_b: String,
    /// `None` when the pair shares no certain votes.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterraterSummary {
    pub label: LabelId,
    pub pairs: Vec<PairKappa>,
    /// Mean over pairs with a defined kappa.
    pub mean_kappa: Option<f64>,
}

/// Pairwise kappa for every reader pair on one label, matched by report id.
pub fn interrater_summary(
    annotations: &[ReaderAnnotation],
    label: LabelId,
) -> Result<InterraterSummary, ReferenceError> {
    let mut by_reader: std::collections::BTreeMap<&str, HashMap<&str, Vote>> = Default::default();
    for a in annotations {
        by_reader
            .entry(a.reader_id.as_str())
            .or_default()
            .insert(a.report_id.as_str(), a.values[label]);
    }
    if by_reader.len() < 2 {
        return Err(ReferenceError::TooFewReaders(by_reader.len()));
    }
    let readers: Vec<_> = by_reader.iter().collect();
    let mut pairs = Vec::new();
    for (i, (ra, va)) in readers.iter().enumerate() {
        for (rb, vb) in &readers[i + 1..] {
            let mut shared: Vec<&&str> = va.keys().filter(|k| vb.contains_key(**k)).collect();
            shared.sort();
            let xs: Vec<i64> = shared.iter().map(|k| va[**k].as_i64()).collect();
            let ys: Vec<i64> = shared.iter().map(|k| vb[**k].as_i64()).collect();
            let kappa = match cohen_kappa(&xs, &ys) {
                Ok(k) => Some(k),
                Err(ReferenceError::NoOverlap) => {
                    tracing::warn!(reader_a = %ra, reader_b = %rb, label = %label, "pair skipped: no overlapping certain votes");
                    None
                }
                Err(e) => return Err(e),
            };
            pairs.push(PairKappa {
                reader_a: ra.to_string(),
                reader_b: rb.to_string(),
                kappa,
            });
        }
    }
    let defined: Vec<f64> = pairs.iter().filter_map(|p| p.kappa).collect();
    let mean_kappa = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(InterraterSummary {
        label,
        pairs,
        mean_kappa,
    })
}

/// CSV `reader_id,report_id,<21 labels>` with cells 1, 0 or -1.
pub fn read_annotations_csv<R: Read>(input: R) -> Result<Vec<ReaderAnnotation>, ReferenceError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers()?.clone();
    if header.get(0) != Some("reader_id") || header.get(1) != Some("report_id") {
        return Err(ReferenceError::BadHeader);
    }
    let columns = label_columns(&header, 2).ok_or(ReferenceError::BadHeader)?;
    let mut out = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let mut values: PerLabel<Vote> = PerLabel::from_fn(|_| Vote::Uncertain);
        for (col, label) in columns.iter().enumerate() {
            let cell = record.get(col + 2).unwrap_or_default();
            let vote = cell
                .parse::<i64>()
                .map_err(|_| ReferenceError::BadVote(i64::MIN))
                .and_then(Vote::try_from)
                .map_err(|_| ReferenceError::BadRow {
                    row: n + 1,
                    message: format!("{}: {cell:?} is not 1, 0 or -1", label.name()),
                })?;
            values[*label] = vote;
        }
        out.push(ReaderAnnotation {
            reader_id: record.get(0).unwrap_or_default().to_string(),
            report_id: record.get(1).unwrap_or_default().to_string(),
            values,
        });
    }
    Ok(out)
}

pub fn write_annotations_csv<W: Write>(
    out: W,
    annotations: &[ReaderAnnotation],
) -> Result<(), ReferenceError> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["reader_id", "report_id"];
    header.extend(canonical_labels().iter().map(|l| l.canonical_name.as_str()));
    writer.write_record(&header)?;
    for a in annotations {
        let mut record = vec![a.reader_id.clone(), a.report_id.clone()];
        record.extend(a.values.values().iter().map(|v| v.as_i64().to_string()));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| ReferenceError::Csv(e.to_string()))?;
    Ok(())
}
