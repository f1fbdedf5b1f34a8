//! Versioned prompt templates and their deterministic rendering.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::Report;
use crate::taxonomy::{resolve_label, LabelId, PerLabel, LABEL_COUNT};

const KEYWORD_TABLE: &str = include_str!("../../data/keywords.json");

pub(crate) const REPORT_OPEN: &str = "<<<REPORT";
pub(crate) const REPORT_CLOSE: &str = "REPORT>>>";
pub(crate) const LABEL_HEADING: &str = "### ";
pub(crate) const CORE_TERMS: &str = "Core terms: ";
pub(crate) const SYNONYMS: &str = "Synonyms: ";
pub(crate) const POSITIVE_EXAMPLES: &str = "Positive examples:";
pub(crate) const NEGATIVE_EXAMPLES: &str = "Negative examples:";
pub(crate) const CLARIFICATIONS: &str = "Clarifications:";
pub(crate) const TERM_SEPARATOR: &str = "; ";

pub const DEFAULT_PREAMBLE: &str = "You are a thoracic radiology assistant. Read the chest X-ray report \
below and decide, for each finding label, whether the report states that the finding is present. \
Answer 1 only for explicit mention or unequivocal evidence of the finding. Answer 0 for negated, \
absent or unmentioned findings. Every label must be answered 0 or 1; uncertain answers are not allowed.";

/// Per-label guidance rendered into the prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBlock {
    #[serde(default)]
    pub core_terms: Vec<String>,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub clarifications: Vec<String>,
    #[serde(default)]
    pub positive_exemplars: Vec<String>,
    #[serde(default)]
    pub negative_exemplars: Vec<String>,
}

impl LabelBlock {
    /// Core terms followed by synonyms.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.core_terms.iter().chain(&self.synonyms).map(String::as_str)
    }
}

/// An immutable prompt template version. All 21 label blocks are always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub version_id: u32,
    pub system_preamble: String,
    pub per_label_blocks: PerLabel<LabelBlock>,
    #[serde(default)]
    pub parent_version: Option<u32>,
    #[serde(default)]
    pub change_note: String,
}

impl PromptVersion {
    /// Root version seeded with the shipped keyword table.
    pub fn root(version_id: u32) -> Self {
        Self {
            version_id,
            system_preamble: DEFAULT_PREAMBLE.to_string(),
            per_label_blocks: keyword_table().map(|_, kw| LabelBlock {
                core_terms: kw.core_terms.clone(),
                synonyms: kw.synonyms.clone(),
                ..Default::default()
            }),
            parent_version: None,
            change_note: "initial structured template".to_string(),
        }
    }

    pub fn block(&self, id: LabelId) -> &LabelBlock {
        &self.per_label_blocks[id]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordEntry {
    pub core_terms: Vec<String>,
    pub synonyms: Vec<String>,
}

/// Shipped per-label keyword table (core terms and synonyms, lowercase).
pub fn keyword_table() -> &'static PerLabel<KeywordEntry> {
    static TABLE: OnceLock<PerLabel<KeywordEntry>> = OnceLock::new();
    TABLE.get_or_init(|| {
        #[derive(Deserialize)]
        struct File {
            labels: Vec<Entry>,
        }
        #[derive(Deserialize)]
        struct Entry {
            label: String,
            core_terms: Vec<String>,
            synonyms: Vec<String>,
        }
        let file: File = serde_json::from_str(KEYWORD_TABLE).expect("embedded keywords.json parses");
        let mut slots: Vec<Option<KeywordEntry>> = vec![None; LABEL_COUNT];
        for entry in file.labels {
            let id = resolve_label(&entry.label).expect("keyword table uses canonical labels").id;
            slots[id.index()] = Some(KeywordEntry {
                core_terms: entry.core_terms,
                synonyms: entry.synonyms,
            });
        }
        PerLabel::from_fn(|id| slots[id.index()].clone().expect("keyword table covers every label"))
    })
}

/// Which part of the report is sent to the labeler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportView {
    #[default]
    FullText,
    /// Findings and Impression bodies only; falls back to the full text when neither exists.
    Sections,
}

pub fn report_text(report: &Report, view: ReportView) -> String {
    match view {
        ReportView::FullText => report.raw_text.clone(),
        ReportView::Sections => {
            let mut parts = Vec::new();
            if let Some(f) = &report.findings {
                parts.push(format!("FINDINGS: {f}"));
            }
            if let Some(i) = &report.impression {
                parts.push(format!("IMPRESSION: {i}"));
            }
            if parts.is_empty() {
                report.raw_text.clone()
            } else {
                parts.join("\n")
            }
        }
    }
}

fn output_instruction() -> String {
    let example = serde_json::to_string(&crate::labeler::LabelValues::all_negative())
        .expect("label values serialize");
    format!(
        "Respond with exactly one JSON object and nothing else. The object must contain all \
{LABEL_COUNT} label names above as keys, each mapped to the integer 0 or 1. Template:\n{example}"
    )
}

pub fn render_prompt(version: &PromptVersion, report: &Report) -> String {
    render_prompt_with(version, report, ReportView::default())
}

/// Deterministic prompt text: preamble, all 21 label blocks, the report, output format.
pub fn render_prompt_with(version: &PromptVersion, report: &Report, view: ReportView) -> String {
    let mut out = String::new();
    out.push_str(version.system_preamble.trim());
    out.push_str("\n\n## Finding labels\n");
    for (id, block) in version.per_label_blocks.iter() {
        out.push('\n');
        out.push_str(LABEL_HEADING);
        out.push_str(id.name());
        out.push('\n');
        if !block.core_terms.is_empty() {
            out.push_str(CORE_TERMS);
            out.push_str(&block.core_terms.join(TERM_SEPARATOR));
            out.push('\n');
        }
        if !block.synonyms.is_empty() {
            out.push_str(SYNONYMS);
            out.push_str(&block.synonyms.join(TERM_SEPARATOR));
            out.push('\n');
        }
        for (heading, items) in [
            (CLARIFICATIONS, &block.clarifications),
            (POSITIVE_EXAMPLES, &block.positive_exemplars),
            (NEGATIVE_EXAMPLES, &block.negative_exemplars),
        ] {
            if items.is_empty() {
                continue;
            }
            out.push_str(heading);
            out.push('\n');
            for item in items {
                out.push_str("- ");
                out.push_str(&item.replace('\n', " "));
                out.push('\n');
            }
        }
    }
    out.push_str("\n## Report\n");
    out.push_str(REPORT_OPEN);
    out.push('\n');
    out.push_str(report_text(report, view).trim());
    out.push('\n');
    out.push_str(REPORT_CLOSE);
    out.push_str("\n\n## Output format\n");
    out.push_str(&output_instruction());
    out.push('\n');
    out
}

/// The report text embedded in a rendered prompt.
pub fn embedded_report(prompt: &str) -> Option<&str> {
    let start = prompt.find(REPORT_OPEN)? + REPORT_OPEN.len();
    let end = prompt[start..].rfind(REPORT_CLOSE)? + start;
    Some(prompt[start..end].trim())
}

/// Label guidance recovered from a rendered prompt; labels without a block stay empty.
pub fn embedded_blocks(prompt: &str) -> PerLabel<LabelBlock> {
    let mut blocks: PerLabel<LabelBlock> = PerLabel::default();
    let head = prompt.split(REPORT_OPEN).next().unwrap_or_default();
    let mut current: Option<LabelId> = None;
    let mut list: Option<&str> = None;
    for line in head.lines() {
        if let Some(name) = line.strip_prefix(LABEL_HEADING) {
            current = resolve_label(name).ok().map(|l| l.id);
            list = None;
            continue;
        }
        let Some(id) = current else { continue };
        let block = &mut blocks[id];
        let split_terms = |s: &str| {
            s.split(TERM_SEPARATOR.trim())
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect::<Vec<_>>()
        };
        if let Some(rest) = line.strip_prefix(CORE_TERMS) {
            block.core_terms = split_terms(rest);
            list = None;
        } else if let Some(rest) = line.strip_prefix(SYNONYMS) {
            block.synonyms = split_terms(rest);
            list = None;
        } else if [CLARIFICATIONS, POSITIVE_EXAMPLES, NEGATIVE_EXAMPLES].contains(&line) {
            list = Some(line);
        } else if let (Some(heading), Some(item)) = (list, line.strip_prefix("- ")) {
            let target = match heading {
                CLARIFICATIONS => &mut block.clarifications,
                POSITIVE_EXAMPLES => &mut block.positive_exemplars,
                _ => &mut block.negative_exemplars,
            };
            target.push(item.to_string());
        } else if line.starts_with("## ") {
            current = None;
        }
    }
    blocks
}
