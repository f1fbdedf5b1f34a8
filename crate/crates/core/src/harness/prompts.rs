//! Append-only prompt lineage with a freeze bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::labeler::{LabelBlock, PromptVersion};
use crate::taxonomy::LabelId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// The three revision modes: vocabulary, clarification, exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RevisionKind {
    SynonymAdded,
    ClarificationAdded,
    ExemplarAdded,
}

impl fmt::Display for RevisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SynonymAdded => "SynonymAdded",
            Self::ClarificationAdded => "ClarificationAdded",
            Self::ExemplarAdded => "ExemplarAdded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Revision {
    SynonymAdded { label: LabelId, term: String },
    ClarificationAdded { label: LabelId, text: String },
    ExemplarAdded { label: LabelId, polarity: Polarity, text: String },
}

impl Revision {
    pub fn label(&self) -> LabelId {
        match self {
            Self::SynonymAdded { label, .. }
            | Self::ClarificationAdded { label, .. }
            | Self::ExemplarAdded { label, .. } => *label,
        }
    }

    pub fn kind(&self) -> RevisionKind {
        match self {
            Self::SynonymAdded { .. } => RevisionKind::SynonymAdded,
            Self::ClarificationAdded { .. } => RevisionKind::ClarificationAdded,
            Self::ExemplarAdded { .. } => RevisionKind::ExemplarAdded,
        }
    }

    fn payload(&self) -> &str {
        match self {
            Self::SynonymAdded { term, .. } => term,
            Self::ClarificationAdded { text, .. } | Self::ExemplarAdded { text, .. } => text,
        }
    }

    fn describe(&self) -> String {
        let what = match self {
            Self::SynonymAdded { .. } => "synonym",
            Self::ClarificationAdded { .. } => "clarification",
            Self::ExemplarAdded { polarity: Polarity::Positive, .. } => "positive exemplar",
            Self::ExemplarAdded { polarity: Polarity::Negative, .. } => "negative exemplar",
        };
        format!("{}: {what} {:?}", self.label(), self.payload().trim())
    }

    fn apply(&self, block: &mut LabelBlock) {
        let (list, value) = match self {
            Self::SynonymAdded { term, .. } => (&mut block.synonyms, term.trim().to_lowercase()),
            Self::ClarificationAdded { text, .. } => (&mut block.clarifications, text.trim().to_string()),
            Self::ExemplarAdded { polarity, text, .. } => (
                match polarity {
                    Polarity::Positive => &mut block.positive_exemplars,
                    Polarity::Negative => &mut block.negative_exemplars,
                },
                text.trim().to_string(),
            ),
        };
        if !list.contains(&value) {
            list.push(value);
        }
    }
}

/// Derive a child version. The parent is left untouched; block lists only grow.
pub fn refine_prompt(
    parent: &PromptVersion,
    revisions: &[Revision],
    version_id: u32,
) -> Result<PromptVersion, HarnessError> {
    if revisions.is_empty() {
        return Err(HarnessError::EmptyRevision("no revisions given".into()));
    }
    if let Some(r) = revisions.iter().find(|r| r.payload().trim().is_empty()) {
        return Err(HarnessError::EmptyRevision(format!("{} {} has an empty payload", r.label(), r.kind())));
    }
    if version_id <= parent.version_id {
        return Err(HarnessError::InvalidArgument(format!(
            "child version {version_id} must exceed parent {}",
            parent.version_id
        )));
    }
    let mut child = parent.clone();
    for r in revisions {
        r.apply(&mut child.per_label_blocks[r.label()]);
    }
    child.version_id = version_id;
    child.parent_version = Some(parent.version_id);
    child.change_note = revisions.iter().map(Revision::describe).collect::<Vec<_>>().join("; ");
    Ok(child)
}

/// All prompt versions of a project. Versions are never edited or removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRegistry {
    versions: BTreeMap<u32, PromptVersion>,
    #[serde(default)]
    frozen: BTreeSet<u32>,
}

impl PromptRegistry {
    /// Registry holding the keyword-seeded root as version 1.
    pub fn with_root() -> Self {
        let mut registry = Self::default();
        registry.versions.insert(1, PromptVersion::root(1));
        registry
    }

    /// Add a parentless version (e.g. an imported template).
    pub fn add_root(&mut self, mut version: PromptVersion) -> u32 {
        version.version_id = self.next_id();
        version.parent_version = None;
        let id = version.version_id;
        self.versions.insert(id, version);
        id
    }

    pub fn get(&self, id: u32) -> Result<&PromptVersion, HarnessError> {
        self.versions.get(&id).ok_or(HarnessError::UnknownVersion(id))
    }

    pub fn versions(&self) -> impl Iterator<Item = &PromptVersion> {
        self.versions.values()
    }

    pub fn latest(&self) -> Option<&PromptVersion> {
        self.versions.values().next_back()
    }

    pub fn next_id(&self) -> u32 {
        self.versions.keys().next_back().map_or(1, |id| id + 1)
    }

    pub fn is_frozen(&self, id: u32) -> bool {
        self.frozen.contains(&id)
    }

    pub fn frozen(&self) -> impl Iterator<Item = u32> + '_ {
        self.frozen.iter().copied()
    }

    pub fn freeze(&mut self, id: u32) -> Result<(), HarnessError> {
        self.get(id)?;
        self.frozen.insert(id);
        Ok(())
    }

    pub fn children(&self, id: u32) -> Vec<u32> {
        self.versions
            .values()
            .filter(|v| v.parent_version == Some(id))
            .map(|v| v.version_id)
            .collect()
    }

    /// Check that a child may be derived from `parent` without creating it.
    pub fn check_refinable(&self, parent: u32) -> Result<(), HarnessError> {
        self.get(parent)?;
        if self.is_frozen(parent) {
            return Err(HarnessError::FrozenVersionViolation(format!(
                "version {parent} is frozen and cannot be refined"
            )));
        }
        Ok(())
    }

    pub fn refine(&mut self, parent: u32, revisions: &[Revision]) -> Result<&PromptVersion, HarnessError> {
        self.check_refinable(parent)?;
        let child = refine_prompt(self.get(parent)?, revisions, self.next_id())?;
        let id = child.version_id;
        self.versions.insert(id, child);
        Ok(&self.versions[&id])
    }

    /// Version ids from the root down to `id`.
    pub fn lineage(&self, id: u32) -> Result<Vec<u32>, HarnessError> {
        let mut chain = vec![id];
        let mut current = self.get(id)?;
        while let Some(parent) = current.parent_version {
            current = self.get(parent)?;
            chain.push(parent);
        }
        chain.reverse();
        Ok(chain)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let registry: Self = serde_json::from_str(&text)?;
        for (id, v) in &registry.versions {
            if *id != v.version_id || v.parent_version.is_some_and(|p| p >= *id || !registry.versions.contains_key(&p)) {
                return Err(HarnessError::InvalidArgument(format!("{}: inconsistent version {id}", path.display())));
            }
        }
        Ok(registry)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        super::store::write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}
