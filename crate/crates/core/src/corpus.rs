//! Report ingestion, section parsing, PHI scrubbing and cohort construction.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::labeler::LabelMatrix;
use crate::taxonomy::PerLabel;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate report id {0:?}")]
    DuplicateReportId(String),
    #[error("report {0:?} has empty text")]
    EmptyText(String),
    #[error("record is missing a report id")]
    MissingReportId,
    #[error("requested {requested} reports but corpus holds {available}")]
    InsufficientReports { requested: usize, available: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown cohort tag {0:?}")]
    UnknownCohortTag(String),
    #[error("unknown language tag {0:?}")]
    UnknownLanguage(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum LanguageTag {
    #[default]
    #[serde(rename = "EN")]
    En,
    #[serde(rename = "CN")]
    Cn,
}

impl FromStr for LanguageTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EN" => Ok(Self::En),
            "CN" | "ZH" => Ok(Self::Cn),
            _ => Err(CorpusError::UnknownLanguage(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortTag {
    Taxonomy,
    Development,
    Test,
    External,
}

impl CohortTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Taxonomy => "taxonomy",
            Self::Development => "development",
            Self::Test => "test",
            Self::External => "external",
        }
    }
}

impl fmt::Display for CohortTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CohortTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "taxonomy" => Ok(Self::Taxonomy),
            "development" | "dev" => Ok(Self::Development),
            "test" => Ok(Self::Test),
            "external" => Ok(Self::External),
            _ => Err(CorpusError::UnknownCohortTag(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impression: Option<String>,
    #[serde(default)]
    pub language: LanguageTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<CohortTag>,
}

impl Report {
    pub fn has_sections(&self) -> bool {
        self.findings.is_some() || self.impression.is_some()
    }

    pub fn word_count(&self) -> usize {
        self.raw_text.split_whitespace().count()
    }
}

/// One input record, as read from JSONL or CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    #[serde(default)]
    pub report_id: String,
    #[serde(alias = "raw_text")]
    pub text: String,
    #[serde(default)]
    pub language: Option<LanguageTag>,
}

impl ReportRecord {
    pub fn new(report_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            report_id: report_id.into(),
            text: text.into(),
            language: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub deidentify: bool,
    pub require_sections: bool,
    pub headers: SectionHeaders,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            deidentify: true,
            require_sections: false,
            headers: SectionHeaders::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub dropped_without_sections: usize,
    pub phi_removals: usize,
}

/// An immutable, id-indexed collection of reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    reports: Vec<Report>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Build from already-parsed reports; ids must be unique.
    pub fn from_reports(reports: Vec<Report>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(reports.len());
        for (i, report) in reports.iter().enumerate() {
            if report.report_id.trim().is_empty() {
                return Err(CorpusError::MissingReportId);
            }
            if report.raw_text.trim().is_empty() {
                return Err(CorpusError::EmptyText(report.report_id.clone()));
            }
            if index.insert(report.report_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateReportId(report.report_id.clone()));
            }
        }
        Ok(Self { reports, index })
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn get(&self, report_id: &str) -> Option<&Report> {
        self.index.get(report_id).map(|&i| &self.reports[i])
    }

    pub fn contains(&self, report_id: &str) -> bool {
        self.index.contains_key(report_id)
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.reports.iter().map(|r| r.report_id.as_str())
    }

    pub fn id_set(&self) -> HashSet<&str> {
        self.ids().collect()
    }

    /// Reports carrying the given cohort tag, in corpus order.
    pub fn cohort(&self, tag: CohortTag) -> Corpus {
        self.filter(|r| r.cohort == Some(tag))
    }

    pub fn filter(&self, mut keep: impl FnMut(&Report) -> bool) -> Corpus {
        let reports: Vec<Report> = self.reports.iter().filter(|r| keep(r)).cloned().collect();
        Corpus::from_reports(reports).expect("subset of a valid corpus is valid")
    }

    /// Copy of the corpus with cohort tags applied; ids not listed keep their tag.
    pub fn with_cohorts(&self, assignment: &[(String, CohortTag)]) -> Corpus {
        let mut reports = self.reports.clone();
        for (id, tag) in assignment {
            if let Some(&i) = self.index.get(id) {
                reports[i].cohort = Some(*tag);
            }
        }
        Corpus {
            reports,
            index: self.index.clone(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for report in &self.reports {
            serde_json::to_writer(&mut out, report).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Read a corpus store previously written by [`Corpus::write_jsonl`].
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, CorpusError> {
        let mut reports = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let report: Report = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                line: n + 1,
                source,
            })?;
            reports.push(report);
        }
        Self::from_reports(reports)
    }
}

/// Turn raw records into a corpus: validate ids, scrub PHI, parse sections.
pub fn ingest(
    records: impl IntoIterator<Item = ReportRecord>,
    options: &IngestOptions,
) -> Result<(Corpus, IngestSummary), CorpusError> {
    let mut summary = IngestSummary::default();
    let mut seen = HashSet::new();
    let mut reports = Vec::new();
    for record in records {
        let id = record.report_id.trim().to_string();
        if id.is_empty() {
            return Err(CorpusError::MissingReportId);
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateReportId(id));
        }
        if record.text.trim().is_empty() {
            return Err(CorpusError::EmptyText(id));
        }
        let language = record.language.unwrap_or_default();
        let text = if options.deidentify {
            let scrubbed = deidentify(&record.text);
            summary.phi_removals += scrubbed.removals;
            scrubbed.clean_text
        } else {
            record.text
        };
        let sections = extract_sections_with(&text, options.headers.for_language(language));
        if options.require_sections && (sections.findings.is_none() || sections.impression.is_none())
        {
            summary.dropped_without_sections += 1;
            continue;
        }
        reports.push(Report {
            report_id: id,
            raw_text: text,
            findings: sections.findings,
            impression: sections.impression,
            language,
            cohort: None,
        });
    }
    summary.accepted = reports.len();
    Ok((Corpus::from_reports(reports)?, summary))
}

/// One JSON object per line: `{"report_id": ..., "text": ..., "language": "EN"}`.
pub fn read_records_jsonl<R: BufRead>(input: R) -> Result<Vec<ReportRecord>, CorpusError> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReportRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                line: n + 1,
                source,
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Two-column CSV with header `report_id,text`.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<ReportRecord>, CorpusError> {
    #[derive(Deserialize)]
    struct Row {
        report_id: String,
        text: String,
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(input);
    reader
        .deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(ReportRecord::new(row.report_id, row.text))
        })
        .collect()
}

/// Header words recognised for each section, per language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SectionHeaders {
    pub english: HeaderSet,
    pub chinese: HeaderSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderSet {
    pub findings: Vec<String>,
    pub impression: Vec<String>,
}

impl Default for HeaderSet {
    fn default() -> Self {
        Self {
            findings: vec!["FINDINGS".into()],
            impression: vec!["IMPRESSION".into()],
        }
    }
}

impl SectionHeaders {
    pub fn for_language(&self, language: LanguageTag) -> &HeaderSet {
        match language {
            LanguageTag::En => &self.english,
            LanguageTag::Cn => &self.chinese,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionKind {
    Findings,
    Impression,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sections {
    pub findings: Option<String>,
    pub impression: Option<String>,
}

/// Full decomposition of a report: text before the first header plus every
/// header-delimited segment in order. Header tokens are the only characters
/// not represented.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SectionSplit {
    pub preamble: String,
    pub segments: Vec<(SectionKind, String)>,
}

impl SectionSplit {
    pub fn sections(&self) -> Sections {
        let collect = |kind: SectionKind| {
            let parts: Vec<&str> = self
                .segments
                .iter()
                .filter(|(k, body)| *k == kind && !body.is_empty())
                .map(|(_, body)| body.as_str())
                .collect();
            (!parts.is_empty()).then(|| parts.join("\n"))
        };
        Sections {
            findings: collect(SectionKind::Findings),
            impression: collect(SectionKind::Impression),
        }
    }
}

pub fn extract_sections(raw_text: &str) -> Sections {
    extract_sections_with(raw_text, &HeaderSet::default())
}

pub fn extract_sections_with(raw_text: &str, headers: &HeaderSet) -> Sections {
    split_sections(raw_text, headers).sections()
}

fn header_regex(headers: &HeaderSet) -> Regex {
    let alternation = |words: &[String]| {
        words
            .iter()
            .map(|w| regex::escape(w.trim()))
            .collect::<Vec<_>>()
            .join("|")
    };
    // Line start: optional colon, header alone on the line or followed by a colon.
    // Mid-line: after sentence punctuation, colon required.
    let pattern = format!(
        r"(?im)(?:^[ \t]*(?:(?P<f1>{f})|(?P<i1>{i}))[ \t]*(?::|$))|(?:[.!?][ \t]+(?:(?P<f2>{f})|(?P<i2>{i}))[ \t]*:)",
        f = alternation(&headers.findings),
        i = alternation(&headers.impression),
    );
    Regex::new(&pattern).expect("header pattern compiles")
}

pub fn split_sections(raw_text: &str, headers: &HeaderSet) -> SectionSplit {
    let default_regex = || {
        static DEFAULT: OnceLock<Regex> = OnceLock::new();
        DEFAULT.get_or_init(|| header_regex(&HeaderSet::default())).clone()
    };
    let regex = if *headers == HeaderSet::default() {
        default_regex()
    } else {
        header_regex(headers)
    };

    let mut markers: Vec<(usize, usize, SectionKind)> = Vec::new();
    for caps in regex.captures_iter(raw_text) {
        let whole = caps.get(0).expect("match");
        let (kind, token) = if let Some(m) = caps.name("f1").or_else(|| caps.name("f2")) {
            (SectionKind::Findings, m)
        } else {
            let m = caps.name("i1").or_else(|| caps.name("i2")).expect("one group");
            (SectionKind::Impression, m)
        };
        // The header token and its colon are dropped; sentence punctuation before a
        // mid-line header stays with the previous segment.
        markers.push((token.start(), whole.end(), kind));
    }

    let mut split = SectionSplit::default();
    let first_start = markers.first().map_or(raw_text.len(), |m| m.0);
    split.preamble = raw_text[..first_start].trim().to_string();
    for (i, &(_, body_start, kind)) in markers.iter().enumerate() {
        let body_end = markers.get(i + 1).map_or(raw_text.len(), |m| m.0);
        split
            .segments
            .push((kind, raw_text[body_start..body_end].trim().to_string()));
    }
    split
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deidentified {
    pub clean_text: String,
    pub removals: usize,
}

pub const DATE_TOKEN: &str = "[DATE]";
pub const NAME_TOKEN: &str = "[NAME]";
pub const PHONE_TOKEN: &str = "[PHONE]";
pub const ID_TOKEN: &str = "[ID]";

fn phi_patterns() -> &'static [(Regex, &'static str)] {
    static PATTERNS: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let month = r"(?:Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|Jun(?:e)?|Jul(?:y)?|Aug(?:ust)?|Sep(?:t(?:ember)?)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)";
        let specs: Vec<(String, &'static str)> = vec![
            (
                r"\b(?:MRN|ID|Acc(?:ession)?)(?:\s*(?:#|No\.?|number))?\s*[:#]?\s*[A-Z]*\d[A-Z0-9-]{3,}\b".into(),
                ID_TOKEN,
            ),
            (r"\b\d{4}[-/.]\d{1,2}[-/.]\d{1,2}\b".into(), DATE_TOKEN),
            (r"\b\d{1,2}[-/.]\d{1,2}[-/.]\d{2,4}\b".into(), DATE_TOKEN),
            (format!(r"\b{month}\.?\s+\d{{1,2}}(?:st|nd|rd|th)?,?\s+\d{{4}}\b"), DATE_TOKEN),
            (format!(r"\b\d{{1,2}}(?:st|nd|rd|th)?\s+{month}\.?,?\s+\d{{4}}\b"), DATE_TOKEN),
            (
                r"(?:\+?\b1[-.\s])?(?:\(\d{3}\)\s?|\b\d{3}[-.\s])\d{3}[-.\s]\d{4}\b".into(),
                PHONE_TOKEN,
            ),
            (
                r"\b(?:Dr|Mr|Mrs|Ms|Miss|Prof)\.?\s+[A-Z][A-Za-z'-]+(?:\s+[A-Z][A-Za-z'-]+)?".into(),
                NAME_TOKEN,
            ),
            (r"\b\d{7,}\b".into(), ID_TOKEN),
        ];
        specs
            .into_iter()
            .map(|(p, token)| (Regex::new(&p).expect("PHI pattern compiles"), token))
            .collect()
    })
}

/// Replace dates, honorific names, phone numbers and identifiers with fixed placeholders.
pub fn deidentify(text: &str) -> Deidentified {
    let mut clean = text.to_string();
    let mut removals = 0;
    for (regex, token) in phi_patterns() {
        let count = regex.find_iter(&clean).count();
        if count > 0 {
            removals += count;
            clean = regex.replace_all(&clean, *token).into_owned();
        }
    }
    Deidentified {
        clean_text: clean,
        removals,
    }
}

/// Draw pairwise-disjoint cohorts of the requested sizes, deterministically for a seed.
/// Each cohort lists report ids in draw order.
pub fn split_cohorts(
    corpus: &Corpus,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Vec<String>>, CorpusError> {
    let requested: usize = sizes.iter().sum();
    if requested > corpus.len() {
        return Err(CorpusError::InsufficientReports {
            requested,
            available: corpus.len(),
        });
    }
    let mut ids: Vec<String> = corpus.ids().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut cohorts = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &size in sizes {
        cohorts.push(ids[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(cohorts)
}

/// Export as CSV `report_id,cohort_tag`.
pub fn write_cohort_csv<W: Write>(
    out: W,
    assignment: &[(String, CohortTag)],
) -> Result<(), CorpusError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["report_id", "cohort_tag"])?;
    for (id, tag) in assignment {
        writer.write_record([id.as_str(), tag.as_str()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_cohort_csv<R: Read>(input: R) -> Result<Vec<(String, CohortTag)>, CorpusError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let id = row.get(0).unwrap_or_default().to_string();
        let tag: CohortTag = row.get(1).unwrap_or_default().parse()?;
        out.push((id, tag));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_reports: usize,
    pub median_word_count: f64,
    pub iqr_word_count: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_label_prevalence: Option<PerLabel<f64>>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Reports, n                     {}", self.n_reports)?;
        writeln!(
            f,
            "Report length (words), median  {} ({}-{})",
            self.median_word_count, self.iqr_word_count.0, self.iqr_word_count.1
        )?;
        if let Some(prevalence) = &self.per_label_prevalence {
            for (id, p) in prevalence.iter() {
                writeln!(f, "{:<32} {:.1}%", id.name(), p * 100.0)?;
            }
        }
        Ok(())
    }
}

/// Quantile of sorted data by linear interpolation between closest ranks:
/// position `h = (n - 1) * q`, value `x[floor h] + (h - floor h) * (x[floor h + 1] - x[floor h])`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Word-count median and interquartile range over `raw_text` (word = non-whitespace run).
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut counts: Vec<f64> = corpus.reports().iter().map(|r| r.word_count() as f64).collect();
    counts.sort_by(f64::total_cmp);
    Ok(CorpusStats {
        n_reports: corpus.len(),
        median_word_count: quantile_sorted(&counts, 0.5),
        iqr_word_count: (quantile_sorted(&counts, 0.25), quantile_sorted(&counts, 0.75)),
        per_label_prevalence: None,
    })
}

/// As [`corpus_stats`], plus per-label positive fraction over the labeled reports of the corpus.
pub fn corpus_stats_with_labels(
    corpus: &Corpus,
    labels: &LabelMatrix,
) -> Result<CorpusStats, CorpusError> {
    let mut stats = corpus_stats(corpus)?;
    let rows: Vec<_> = corpus.ids().filter_map(|id| labels.get(id)).collect();
    if !rows.is_empty() {
        stats.per_label_prevalence = Some(PerLabel::from_fn(|id| {
            rows.iter().filter(|v| v.get(id)).count() as f64 / rows.len() as f64
        }));
    }
    Ok(stats)
}
