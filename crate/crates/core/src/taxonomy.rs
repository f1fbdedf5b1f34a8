//! The canonical 21-label chest X-ray finding schema.
//!
//! The schema ships as a versioned JSON data file (`data/taxonomy.json`) and is
//! validated on load: exactly 21 labels with dense ids, 14 of them flagged as
//! comparable with CheXbert output, and an alias map that never points one
//! name at two labels.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::sync::OnceLock;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Number of finding labels in the schema.
pub const LABEL_COUNT: usize = 21;

/// Number of labels with a directly comparable CheXbert category.
pub const CHEXBERT_COMPARABLE_COUNT: usize = 14;

const STANDARD_TAXONOMY: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("unknown label: {0:?}")]
    UnknownLabel(String),
    #[error("malformed taxonomy file: {0}")]
    Malformed(String),
    #[error("taxonomy must define exactly {LABEL_COUNT} labels, found {0}")]
    WrongLabelCount(usize),
    #[error("label ids must be dense 0..{LABEL_COUNT}; id {0} is out of place")]
    NonDenseIds(usize),
    #[error("expected {CHEXBERT_COMPARABLE_COUNT} CheXbert-comparable labels, found {0}")]
    WrongComparableCount(usize),
    #[error("name {name:?} resolves to both {first:?} and {second:?}")]
    AmbiguousAlias {
        name: String,
        first: String,
        second: String,
    },
}

/// Index of a label in the canonical ordering (0..21).
/// Serialized as its canonical name; deserialization accepts aliases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelId(u8);

impl Serialize for LabelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LabelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        resolve_label(&name).map(|l| l.id).map_err(serde::de::Error::custom)
    }
}

impl LabelId {
    pub fn new(index: usize) -> Option<Self> {
        (index < LABEL_COUNT).then_some(Self(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// All label ids in canonical order.
    pub fn all() -> impl DoubleEndedIterator<Item = LabelId> + ExactSizeIterator + Clone {
        (0..LABEL_COUNT as u8).map(LabelId)
    }

    /// Canonical name from the standard taxonomy.
    pub fn name(self) -> &'static str {
        &Taxonomy::standard().labels[self.index()].canonical_name
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingLabel {
    #[serde(with = "id_index")]
    pub id: LabelId,
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub chexbert_comparable: bool,
}

mod id_index {
    use super::{LabelId, LABEL_COUNT};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(id: &LabelId, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(id.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LabelId, D::Error> {
        let index = usize::deserialize(d)?;
        LabelId::new(index).ok_or_else(|| {
            serde::de::Error::custom(format!("label id {index} out of range 0..{LABEL_COUNT}"))
        })
    }
}

#[derive(Deserialize)]
struct TaxonomyFile {
    version: String,
    labels: Vec<RawLabel>,
}

#[derive(Deserialize)]
struct RawLabel {
    id: usize,
    canonical_name: String,
    #[serde(default)]
    aliases: Vec<String>,
    chexbert_comparable: bool,
}

/// A validated label schema with a normalized name lookup.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    version: String,
    labels: Vec<FindingLabel>,
    lookup: HashMap<String, LabelId>,
}

/// Lowercase, treat `_` as a space and collapse whitespace runs.
pub(crate) fn normalize_name(name: &str) -> String {
    name.replace('_', " ")
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl Taxonomy {
    pub fn from_json(json: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile =
            serde_json::from_str(json).map_err(|e| TaxonomyError::Malformed(e.to_string()))?;
        if file.labels.len() != LABEL_COUNT {
            return Err(TaxonomyError::WrongLabelCount(file.labels.len()));
        }
        let mut labels = Vec::with_capacity(LABEL_COUNT);
        for (pos, raw) in file.labels.into_iter().enumerate() {
            if raw.id != pos {
                return Err(TaxonomyError::NonDenseIds(raw.id));
            }
            labels.push(FindingLabel {
                id: LabelId(pos as u8),
                canonical_name: raw.canonical_name,
                aliases: raw.aliases,
                chexbert_comparable: raw.chexbert_comparable,
            });
        }
        let comparable = labels.iter().filter(|l| l.chexbert_comparable).count();
        if comparable != CHEXBERT_COMPARABLE_COUNT {
            return Err(TaxonomyError::WrongComparableCount(comparable));
        }

        let mut lookup: HashMap<String, LabelId> = HashMap::new();
        for label in &labels {
            for name in std::iter::once(&label.canonical_name).chain(&label.aliases) {
                let key = normalize_name(name);
                match lookup.get(&key) {
                    Some(&other) if other != label.id => {
                        return Err(TaxonomyError::AmbiguousAlias {
                            name: name.clone(),
                            first: labels[other.index()].canonical_name.clone(),
                            second: label.canonical_name.clone(),
                        });
                    }
                    _ => {
                        lookup.insert(key, label.id);
                    }
                }
            }
        }
        Ok(Self {
            version: file.version,
            labels,
            lookup,
        })
    }

    /// The shipped schema. Loaded once; panics only if the embedded file is corrupt.
    pub fn standard() -> &'static Taxonomy {
        static STANDARD: OnceLock<Taxonomy> = OnceLock::new();
        STANDARD.get_or_init(|| {
            Taxonomy::from_json(STANDARD_TAXONOMY).expect("embedded taxonomy.json is valid")
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn labels(&self) -> &[FindingLabel] {
        &self.labels
    }

    pub fn label(&self, id: LabelId) -> &FindingLabel {
        &self.labels[id.index()]
    }

    pub fn resolve(&self, name: &str) -> Result<&FindingLabel, TaxonomyError> {
        self.lookup
            .get(&normalize_name(name))
            .map(|&id| &self.labels[id.index()])
            .ok_or_else(|| TaxonomyError::UnknownLabel(name.to_string()))
    }

    pub fn chexbert_comparable(&self) -> impl Iterator<Item = &FindingLabel> {
        self.labels.iter().filter(|l| l.chexbert_comparable)
    }
}

/// All 21 labels in canonical order.
pub fn canonical_labels() -> &'static [FindingLabel] {
    Taxonomy::standard().labels()
}

/// Case- and whitespace-insensitive lookup by canonical name or alias.
pub fn resolve_label(name: &str) -> Result<&'static FindingLabel, TaxonomyError> {
    Taxonomy::standard().resolve(name)
}

/// A value for every label, indexed by [`LabelId`].
///
/// Serializes as a JSON/TOML map keyed by canonical name in canonical order.
/// Deserialization accepts aliases but insists on all 21 labels exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PerLabel<T>(Vec<T>);

impl<T> PerLabel<T> {
    pub fn from_fn(mut f: impl FnMut(LabelId) -> T) -> Self {
        Self(LabelId::all().map(&mut f).collect())
    }

    pub fn try_from_vec(values: Vec<T>) -> Option<Self> {
        (values.len() == LABEL_COUNT).then_some(Self(values))
    }

    pub fn iter(&self) -> impl Iterator<Item = (LabelId, &T)> {
        LabelId::all().zip(self.0.iter())
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn map<U>(&self, mut f: impl FnMut(LabelId, &T) -> U) -> PerLabel<U> {
        PerLabel(self.iter().map(|(id, v)| f(id, v)).collect())
    }
}

impl<T: Default> Default for PerLabel<T> {
    fn default() -> Self {
        Self::from_fn(|_| T::default())
    }
}

impl<T> Index<LabelId> for PerLabel<T> {
    type Output = T;

    fn index(&self, id: LabelId) -> &T {
        &self.0[id.index()]
    }
}

impl<T> IndexMut<LabelId> for PerLabel<T> {
    fn index_mut(&mut self, id: LabelId) -> &mut T {
        &mut self.0[id.index()]
    }
}

impl<T: Serialize> Serialize for PerLabel<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(LABEL_COUNT))?;
        for (id, value) in self.iter() {
            map.serialize_entry(id.name(), value)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for PerLabel<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PerLabelVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Deserialize<'de>> Visitor<'de> for PerLabelVisitor<T> {
            type Value = PerLabel<T>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a map with all {LABEL_COUNT} finding labels")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut slots: Vec<Option<T>> = (0..LABEL_COUNT).map(|_| None).collect();
                while let Some(key) = access.next_key::<String>()? {
                    let label = resolve_label(&key).map_err(de::Error::custom)?;
                    let value = access.next_value()?;
                    if slots[label.id.index()].replace(value).is_some() {
                        return Err(de::Error::custom(format!(
                            "label {:?} given more than once",
                            label.canonical_name
                        )));
                    }
                }
                let mut values = Vec::with_capacity(LABEL_COUNT);
                for (id, slot) in LabelId::all().zip(slots) {
                    values.push(slot.ok_or_else(|| {
                        de::Error::custom(format!("missing label {:?}", id.name()))
                    })?);
                }
                Ok(PerLabel(values))
            }
        }

        deserializer.deserialize_map(PerLabelVisitor(std::marker::PhantomData))
    }
}
