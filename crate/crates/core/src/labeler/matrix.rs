use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::taxonomy::{canonical_labels, resolve_label, LabelId, LABEL_COUNT};

/// Strict-binary assignment over all 21 labels. Uncertainty is not representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelValues([bool; LABEL_COUNT]);

impl LabelValues {
    pub fn all_negative() -> Self {
        Self::default()
    }

    pub fn from_fn(mut f: impl FnMut(LabelId) -> bool) -> Self {
        let mut values = [false; LABEL_COUNT];
        for id in LabelId::all() {
            values[id.index()] = f(id);
        }
        Self(values)
    }

    pub fn get(&self, id: LabelId) -> bool {
        self.0[id.index()]
    }

    pub fn set(&mut self, id: LabelId, value: bool) {
        self.0[id.index()] = value;
    }

    pub fn positives(&self) -> impl Iterator<Item = LabelId> + '_ {
        LabelId::all().filter(|&id| self.get(id))
    }

    pub fn complement(&self) -> Self {
        Self::from_fn(|id| !self.get(id))
    }

    pub fn as_array(&self) -> &[bool; LABEL_COUNT] {
        &self.0
    }
}

impl Serialize for LabelValues {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(LABEL_COUNT))?;
        for id in LabelId::all() {
            map.serialize_entry(id.name(), &u8::from(self.get(id)))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for LabelValues {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ValuesVisitor;

        impl<'de> Visitor<'de> for ValuesVisitor {
            type Value = LabelValues;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a map of all {LABEL_COUNT} labels to 0 or 1")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<LabelValues, A::Error> {
                let mut slots = [None; LABEL_COUNT];
                while let Some(key) = access.next_key::<String>()? {
                    let label = resolve_label(&key).map_err(de::Error::custom)?;
                    let raw: u8 = access.next_value()?;
                    let value = match raw {
                        0 => false,
                        1 => true,
                        other => {
                            return Err(de::Error::custom(format!(
                                "{}: value {other} is not 0 or 1",
                                label.canonical_name
                            )))
                        }
                    };
                    if slots[label.id.index()].replace(value).is_some() {
                        return Err(de::Error::custom(format!(
                            "label {:?} given more than once",
                            label.canonical_name
                        )));
                    }
                }
                let mut values = LabelValues::default();
                for id in LabelId::all() {
                    let v = slots[id.index()]
                        .ok_or_else(|| de::Error::custom(format!("missing label {:?}", id.name())))?;
                    values.set(id, v);
                }
                Ok(values)
            }
        }

        deserializer.deserialize_map(ValuesVisitor)
    }
}

/// One report's labeler output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub report_id: String,
    pub values: LabelValues,
    pub prompt_version: u32,
    pub backend_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum MatrixError {
    #[error("duplicate report id {0:?} in label matrix")]
    DuplicateReportId(String),
    #[error("label matrix header must be report_id followed by the {LABEL_COUNT} canonical labels")]
    BadHeader,
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Report x label binary matrix, rows in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMatrix {
    report_ids: Vec<String>,
    rows: Vec<LabelValues>,
    index: HashMap<String, usize>,
}

impl LabelMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(
        rows: impl IntoIterator<Item = (String, LabelValues)>,
    ) -> Result<Self, MatrixError> {
        let mut matrix = Self::new();
        for (id, values) in rows {
            matrix.insert(id, values)?;
        }
        Ok(matrix)
    }

    pub fn insert(&mut self, report_id: String, values: LabelValues) -> Result<(), MatrixError> {
        if self.index.contains_key(&report_id) {
            return Err(MatrixError::DuplicateReportId(report_id));
        }
        self.index.insert(report_id.clone(), self.rows.len());
        self.report_ids.push(report_id);
        self.rows.push(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, report_id: &str) -> Option<&LabelValues> {
        self.index.get(report_id).map(|&i| &self.rows[i])
    }

    pub fn contains(&self, report_id: &str) -> bool {
        self.index.contains_key(report_id)
    }

    pub fn report_ids(&self) -> &[String] {
        &self.report_ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LabelValues)> {
        self.report_ids.iter().map(String::as_str).zip(&self.rows)
    }

    /// Rows restricted to `ids` (in the order given); unknown ids are skipped.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> LabelMatrix {
        let mut out = LabelMatrix::new();
        for id in ids {
            if let Some(values) = self.get(id) {
                let _ = out.insert(id.to_string(), *values);
            }
        }
        out
    }

    /// CSV with header `report_id,<21 canonical names>`, values 0/1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MatrixError> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["report_id"];
        header.extend(canonical_labels().iter().map(|l| l.canonical_name.as_str()));
        writer.write_record(&header)?;
        for (id, values) in self.iter() {
            let mut record = vec![id.to_string()];
            record.extend(values.as_array().iter().map(|&v| u8::from(v).to_string()));
            writer.write_record(&record)?;
        }
        writer.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MatrixError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let columns = label_columns(reader.headers()?, 1).ok_or(MatrixError::BadHeader)?;
        let mut matrix = LabelMatrix::new();
        for (n, record) in reader.records().enumerate() {
            let record = record?;
            let row = n + 1;
            let id = record.get(0).unwrap_or_default().to_string();
            let mut values = LabelValues::default();
            for (col, id_label) in columns.iter().enumerate() {
                let cell = record.get(col + 1).unwrap_or_default();
                let v = match cell {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(MatrixError::BadRow {
                            row,
                            message: format!("{}: {other:?} is not 0 or 1", id_label.name()),
                        })
                    }
                };
                values.set(*id_label, v);
            }
            matrix.insert(id, values)?;
        }
        Ok(matrix)
    }
}

/// Map the label columns of a CSV header (after `skip` leading columns) onto label ids.
/// Returns `None` unless every label appears exactly once.
pub(crate) fn label_columns(header: &csv::StringRecord, skip: usize) -> Option<Vec<LabelId>> {
    let names: Vec<&str> = header.iter().skip(skip).collect();
    if names.len() != LABEL_COUNT {
        return None;
    }
    let mut seen = [false; LABEL_COUNT];
    let mut ids = Vec::with_capacity(LABEL_COUNT);
    for name in names {
        let id = resolve_label(name).ok()?.id;
        if std::mem::replace(&mut seen[id.index()], true) {
            return None;
        }
        ids.push(id);
    }
    Some(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_header() {
        let mut m = LabelMatrix::new();
        m.insert("a".into(), LabelValues::from_fn(|id| id.index() % 2 == 0))
            .unwrap();
        m.insert("b".into(), LabelValues::all_negative()).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("report_id,Atelectasis,Cardiomegaly,"));
        assert!(text.contains("Pulmonary Vascular Abnormal\n"));
        assert_eq!(LabelMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn duplicate_rows_rejected() {
        let mut m = LabelMatrix::new();
        m.insert("a".into(), LabelValues::default()).unwrap();
        assert!(matches!(
            m.insert("a".into(), LabelValues::default()),
            Err(MatrixError::DuplicateReportId(_))
        ));
    }

    #[test]
    fn bad_cells_rejected() {
        let mut header = vec!["report_id".to_string()];
        header.extend(canonical_labels().iter().map(|l| l.canonical_name.clone()));
        let mut row = vec!["x".to_string()];
        row.extend((0..21).map(|i| if i == 3 { "-1".into() } else { "0".into() }));
        let text = format!("{}\n{}\n", header.join(","), row.join(","));
        assert!(matches!(
            LabelMatrix::read_csv(text.as_bytes()),
            Err(MatrixError::BadRow { row: 1, .. })
        ));
        assert!(matches!(
            LabelMatrix::read_csv("report_id,Atelectasis\n".as_bytes()),
            Err(MatrixError::BadHeader)
        ));
    }
}
