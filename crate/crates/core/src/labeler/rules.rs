//! Deterministic keyword labeler with a clause-bounded negation window.
//!
//! This is the substrate for the offline mock backend. It is not a clinical
//! labeler and makes no accuracy claims.

use crate::corpus::Report;
use crate::labeler::prompt::{keyword_table, LabelBlock};
use crate::labeler::LabelValues;
use crate::taxonomy::{LabelId, PerLabel};

/// Tokens before a match that are searched for a negation cue.
pub const NEGATION_WINDOW: usize = 5;

const NEGATION_CUES: &[&[&str]] = &[
    &["no"],
    &["not"],
    &["without"],
    &["absent"],
    &["neither"],
    &["nor"],
    &["negative", "for"],
    &["free", "of"],
    &["absence", "of"],
    &["resolution", "of"],
    &["rule", "out"],
];

/// Words that end a negation's scope, like clause punctuation does.
const SCOPE_BREAKS: &[&str] = &["but", "however", "although", "though"];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    text: String,
    /// Index of the clause this token belongs to.
    clause: usize,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut clause = 0;
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<Token>, clause: &mut usize| {
        if word.is_empty() {
            return;
        }
        let text = std::mem::take(word);
        if SCOPE_BREAKS.contains(&text.as_str()) {
            *clause += 1;
        }
        tokens.push(Token {
            text,
            clause: *clause,
        });
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            flush(&mut word, &mut tokens, &mut clause);
            if matches!(ch, '.' | ';' | ':' | '!' | '?' | '\n') {
                clause += 1;
            }
        }
    }
    flush(&mut word, &mut tokens, &mut clause);
    tokens
}

fn phrase_tokens(phrase: &str) -> Vec<String> {
    tokenize(phrase).into_iter().map(|t| t.text).collect()
}

/// Starting indices of every occurrence of `phrase` within `tokens`.
fn find_phrase(tokens: &[Token], phrase: &[String]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - phrase.len())
        .filter(|&start| {
            phrase
                .iter()
                .enumerate()
                .all(|(k, p)| tokens[start + k].text == *p)
        })
        .collect()
}

fn is_negated(tokens: &[Token], start: usize) -> bool {
    let clause = tokens[start].clause;
    let from = start.saturating_sub(NEGATION_WINDOW);
    let window: Vec<&str> = tokens[from..start]
        .iter()
        .filter(|t| t.clause == clause)
        .map(|t| t.text.as_str())
        .collect();
    NEGATION_CUES.iter().any(|cue| {
        window
            .windows(cue.len())
            .any(|w| w.iter().zip(cue.iter()).all(|(a, b)| a == b))
    })
}

fn contains_phrase(haystack: &[Token], phrase: &str) -> bool {
    !find_phrase(haystack, &phrase_tokens(phrase)).is_empty()
}

/// Label text with the given per-label guidance.
///
/// Per label: a negative exemplar found in the text forces 0; otherwise a
/// positive exemplar found in the text forces 1; otherwise the label is 1 iff
/// some term occurs outside a negation window.
pub fn rule_label_text(blocks: &PerLabel<LabelBlock>, text: &str) -> LabelValues {
    let tokens = tokenize(text);
    LabelValues::from_fn(|id| label_one(&tokens, &blocks[id]))
}

fn label_one(tokens: &[Token], block: &LabelBlock) -> bool {
    if block.negative_exemplars.iter().any(|e| contains_phrase(tokens, e)) {
        return false;
    }
    if block.positive_exemplars.iter().any(|e| contains_phrase(tokens, e)) {
        return true;
    }
    block.terms().any(|term| {
        find_phrase(tokens, &phrase_tokens(term))
            .into_iter()
            .any(|start| !is_negated(tokens, start))
    })
}

pub(crate) fn default_blocks() -> &'static PerLabel<LabelBlock> {
    static BLOCKS: std::sync::OnceLock<PerLabel<LabelBlock>> = std::sync::OnceLock::new();
    BLOCKS.get_or_init(|| {
        keyword_table().map(|_, kw| LabelBlock {
            core_terms: kw.core_terms.clone(),
            synonyms: kw.synonyms.clone(),
            ..Default::default()
        })
    })
}

/// Label a report with the shipped keyword table.
pub fn rule_label(report: &Report) -> LabelValues {
    rule_label_text(default_blocks(), &report.raw_text)
}

/// Sentence containing the first non-negated or negated term hit for `label`, if any.
pub fn matching_sentence<'a>(
    blocks: &PerLabel<LabelBlock>,
    label: LabelId,
    text: &'a str,
) -> Option<&'a str> {
    let lower = text.to_lowercase();
    if lower.len() != text.len() {
        return None;
    }
    let block = &blocks[label];
    let phrases = block
        .positive_exemplars
        .iter()
        .chain(&block.negative_exemplars)
        .map(String::as_str)
        .chain(block.terms());
    let hit = phrases
        .filter_map(|p| {
            let needle = p.to_lowercase();
            find_word(&lower, &needle)
        })
        .min()?;
    let start = text[..hit]
        .rfind(['.', '!', '?', '\n', ';'])
        .map_or(0, |i| i + 1);
    let end = text[hit..]
        .find(['.', '!', '?', '\n', ';'])
        .map_or(text.len(), |i| hit + i + 1);
    Some(text[start..end].trim())
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let bytes = haystack.as_bytes();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let left_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let right_ok = end == haystack.len() || !bytes[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return Some(start);
        }
        from = start + 1;
        while !haystack.is_char_boundary(from) {
            from += 1;
        }
    }
    None
}
