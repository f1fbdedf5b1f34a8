//! Strict parsing of labeler responses.

use serde_json::Value;

use crate::labeler::LabelValues;
use crate::taxonomy::{resolve_label, LabelId, LABEL_COUNT};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ResponseError {
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("response is missing labels: {}", .0.join(", "))]
    MissingLabel(Vec<String>),
    #[error("illegal value for {label}: {value} (only 0 or 1 allowed)")]
    IllegalValue { label: String, value: String },
}

/// Locate the first JSON object embedded in `raw`.
fn first_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn binary(value: &Value) -> Option<bool> {
    match value {
        Value::Number(n) => match (n.as_u64(), n.as_f64()) {
            (Some(0), _) => Some(false),
            (Some(1), _) => Some(true),
            (None, Some(0.0)) => Some(false),
            (None, Some(1.0)) => Some(true),
            _ => None,
        },
        Value::String(s) => match s.trim() {
            "0" => Some(false),
            "1" => Some(true),
            _ => None,
        },
        _ => None,
    }
}

/// Parse a model response into a complete strict-binary value map.
///
/// The first JSON object in `raw` must carry every label exactly once
/// (aliases allowed). Values must be 0 or 1, as numbers or the strings
/// `"0"`/`"1"`; anything else, including -1, null and "uncertain", is rejected.
pub fn parse_label_response(raw: &str) -> Result<LabelValues, ResponseError> {
    let object = first_object(raw)
        .ok_or_else(|| ResponseError::MalformedResponse("no JSON object found".into()))?;

    let mut slots: [Option<bool>; LABEL_COUNT] = [None; LABEL_COUNT];
    for (key, value) in &object {
        let label = resolve_label(key)
            .map_err(|_| ResponseError::MalformedResponse(format!("unknown label key {key:?}")))?;
        let v = binary(value).ok_or_else(|| ResponseError::IllegalValue {
            label: label.canonical_name.clone(),
            value: value.to_string(),
        })?;
        if slots[label.id.index()].replace(v).is_some() {
            return Err(ResponseError::MalformedResponse(format!(
                "label {:?} given more than once",
                label.canonical_name
            )));
        }
    }

    let missing: Vec<String> = LabelId::all()
        .filter(|id| slots[id.index()].is_none())
        .map(|id| id.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ResponseError::MissingLabel(missing));
    }
    Ok(LabelValues::from_fn(|id| slots[id.index()].unwrap_or(false)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn object_with(mut edit: impl FnMut(&mut serde_json::Map<String, Value>)) -> String {
        let mut map = serde_json::Map::new();
        for id in LabelId::all() {
            map.insert(id.name().to_string(), Value::from(0));
        }
        edit(&mut map);
        Value::Object(map).to_string()
    }

    #[test]
    fn all_negative_object() {
        let v = parse_label_response(&object_with(|_| {})).unwrap();
        assert_eq!(v, LabelValues::all_negative());
    }

    #[test]
    fn object_inside_chatter() {
        let raw = format!(
            "Sure! Here is the result:\n```json\n{}\n```\nLet me know {{if}} needed.",
            object_with(|m| {
                m.insert("Fracture".into(), Value::from("1"));
            })
        );
        let v = parse_label_response(&raw).unwrap();
        assert_eq!(v.positives().map(LabelId::name).collect::<Vec<_>>(), ["Fracture"]);
    }

    #[test]
    fn missing_label() {
        let raw = object_with(|m| {
            m.remove("Edema");
        });
        assert_eq!(
            parse_label_response(&raw),
            Err(ResponseError::MissingLabel(vec!["Edema".into()]))
        );
    }

    #[test]
    fn uncertain_values_rejected() {
        for bad in [Value::from(-1), Value::Null, Value::from("uncertain"), Value::from(2), Value::from(0.5)] {
            let raw = object_with(|m| {
                m.insert("Pneumothorax".into(), bad.clone());
            });
            assert!(
                matches!(parse_label_response(&raw), Err(ResponseError::IllegalValue { ref label, .. }) if label == "Pneumothorax"),
                "{bad}"
            );
        }
    }

    #[test]
    fn aliases_and_duplicates() {
        let raw = object_with(|m| {
            m.remove("Pleural Effusion");
            m.insert("pleural_effusion".into(), Value::from(1));
        });
        assert!(parse_label_response(&raw).unwrap().get(resolve_label("Pleural Effusion").unwrap().id));

        let raw = object_with(|m| {
            m.insert("effusion".into(), Value::from(1));
        });
        assert!(matches!(parse_label_response(&raw), Err(ResponseError::MalformedResponse(_))));
    }

    #[test]
    fn no_object() {
        assert!(matches!(
            parse_label_response("I cannot help with that."),
            Err(ResponseError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_label_response("{\"Atelectasis\": 0,"),
            Err(ResponseError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_label_response("{\"Brain\": 1}"),
            Err(ResponseError::MalformedResponse(_))
        ));
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(bits in proptest::array::uniform21(any::<bool>())) {
            let values = LabelValues::from_fn(|id| bits[id.index()]);
            let raw = serde_json::to_string(&values).unwrap();
            prop_assert_eq!(parse_label_response(&raw).unwrap(), values);
        }
    }
}
