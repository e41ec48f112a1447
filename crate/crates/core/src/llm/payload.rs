use std::sync::LazyLock;

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Shape a template's completion must take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadSchema {
    /// Free text; the trimmed completion becomes a JSON string.
    Text,
    /// `{"subject", "relation", "object"}`.
    Triple,
    /// `{"question", "answer"}`.
    QaPair,
    /// A JSON array of objects; per-item checks happen in the consuming stage so
    /// one bad item does not sink the whole list.
    ObjectList,
    /// A JSON array of strings.
    StringList,
    /// `{"entities": [...], "scenes": [...]}`.
    SceneGraphBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{reason}")]
pub struct ParseFailure {
    pub reason: String,
}

impl ParseFailure {
    fn new(reason: impl Into<String>) -> Self {
        ParseFailure { reason: reason.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriplePayload {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPayload {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBundleEntity {
    pub id: Value,
    pub entity: String,
    pub attributes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBundleRelation {
    pub source: Value,
    #[serde(default)]
    pub target: Value,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBundleScene {
    #[serde(default)]
    pub scene: Option<String>,
    pub relations: Vec<RawBundleRelation>,
}

/// Caption-to-graph output before semantic validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBundle {
    pub entities: Vec<RawBundleEntity>,
    pub scenes: Vec<RawBundleScene>,
}

impl PayloadSchema {
    pub fn validate(self, value: &Value) -> Result<(), ParseFailure> {
        match self {
            PayloadSchema::Text => match value {
                Value::String(s) if !s.trim().is_empty() => Ok(()),
                Value::String(_) => Err(ParseFailure::new("empty completion")),
                _ => Err(ParseFailure::new("expected text")),
            },
            PayloadSchema::Triple => {
                let t: TriplePayload = typed(value)?;
                for (field, v) in [("subject", &t.subject), ("relation", &t.relation), ("object", &t.object)] {
                    if v.trim().is_empty() {
                        return Err(ParseFailure::new(format!("empty field `{field}`")));
                    }
                }
                Ok(())
            }
            PayloadSchema::QaPair => {
                let qa: QaPayload = typed(value)?;
                if qa.question.trim().is_empty() || qa.answer.trim().is_empty() {
                    return Err(ParseFailure::new("empty question or answer"));
                }
                Ok(())
            }
            PayloadSchema::ObjectList => match value {
                Value::Array(items) => match items.iter().position(|v| !v.is_object()) {
                    None => Ok(()),
                    Some(i) => Err(ParseFailure::new(format!("item {i} is not an object"))),
                },
                _ => Err(ParseFailure::new("expected a JSON list")),
            },
            PayloadSchema::StringList => typed::<Vec<String>>(value).map(|_| ()),
            PayloadSchema::SceneGraphBundle => typed::<RawBundle>(value).map(|_| ()),
        }
    }

    /// A minimal completion that conforms to this schema.
    pub fn example_completion(self) -> &'static str {
        match self {
            PayloadSchema::Text => "A short reply.",
            PayloadSchema::Triple => r#"{"subject": "chair", "relation": "designed by", "object": "artisan (Liora Vex)"}"#,
            PayloadSchema::QaPair => r#"{"question": "q", "answer": "a"}"#,
            PayloadSchema::ObjectList => "[]",
            PayloadSchema::StringList => r#"["SLIC", "FLIC"]"#,
            PayloadSchema::SceneGraphBundle => {
                r#"{"entities": [{"id": "1", "entity": "dog", "attributes": []}], "scenes": [{"scene": "scene_1", "relations": [{"source": "1", "target": null, "relation": "runs"}]}]}"#
            }
        }
    }
}

fn typed<T: DeserializeOwned>(value: &Value) -> Result<T, ParseFailure> {
    T::deserialize(value).map_err(|e| ParseFailure::new(e.to_string()))
}

/// Deserializes an already-validated payload into its typed form.
pub fn decode<T: DeserializeOwned>(value: &Value) -> Result<T, ParseFailure> {
    typed(value)
}

static FENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```").unwrap());
static TRAILING_COMMA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",(\s*[}\]])").unwrap());

/// Extracts and validates the structured payload of a completion.
///
/// Code fences and leading prose are stripped; the first JSON value found is
/// parsed (trailing commas tolerated) and checked against `schema`. For
/// [`PayloadSchema::Text`] the trimmed completion itself is the payload.
pub fn parse_payload(raw: &str, schema: PayloadSchema) -> Result<Value, ParseFailure> {
    if schema == PayloadSchema::Text {
        let text = match FENCE.captures(raw) {
            Some(c) if raw.trim_start().starts_with("```") => c[1].trim().to_string(),
            _ => raw.trim().to_string(),
        };
        let value = Value::String(text);
        schema.validate(&value)?;
        return Ok(value);
    }
    let body = FENCE.captures(raw).map_or(raw, |c| c.get(1).unwrap().as_str());
    let value = first_json_value(body).ok_or_else(|| ParseFailure::new("no JSON value found"))?;
    schema.validate(&value)?;
    Ok(value)
}

fn first_json_value(text: &str) -> Option<Value> {
    let starts = text.char_indices().filter(|(_, c)| *c == '{' || *c == '[').map(|(i, _)| i);
    for start in starts {
        let tail = &text[start..];
        if let Some(v) = parse_prefix(tail) {
            return Some(v);
        }
        let repaired = TRAILING_COMMA.replace_all(tail, "$1");
        if let Some(v) = parse_prefix(&repaired) {
            return Some(v);
        }
    }
    None
}

fn parse_prefix(text: &str) -> Option<Value> {
    serde_json::Deserializer::from_str(text).into_iter::<Value>().next()?.ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn qa_pair_ok_and_missing_answer() {
        let v = parse_payload(r#"{"question":"q","answer":"a"}"#, PayloadSchema::QaPair).unwrap();
        assert_eq!(v, json!({"question": "q", "answer": "a"}));
        let err = parse_payload(r#"{"question":"q"}"#, PayloadSchema::QaPair).unwrap_err();
        assert!(err.reason.contains("missing field `answer`"), "{}", err.reason);
    }

    #[test]
    fn fenced_and_prose_wrapped_completions() {
        // (completion, expected value) — expected values written by hand
        let cases: &[(&str, Value)] = &[
            ("```json\n[{\"a\": 1}]\n```", json!([{"a": 1}])),
            ("Sure! Here you go:\n```\n[]\n```\nLet me know.", json!([])),
            ("Here is the list [as requested]: [{\"a\": 2},]", json!([{"a": 2}])),
            ("[{\"a\": 3}] trailing words [{\"b\": 4}]", json!([{"a": 3}])),
            ("```json\n[\n  {\"a\": 5, \"b\": [1,2,],},\n]\n```", json!([{"a": 5, "b": [1, 2]}])),
        ];
        for (raw, expected) in cases {
            assert_eq!(&parse_payload(raw, PayloadSchema::ObjectList).unwrap(), expected, "{raw}");
        }
    }

    #[test]
    fn schema_mismatches_are_failures() {
        assert!(parse_payload("no json here", PayloadSchema::ObjectList).is_err());
        assert!(parse_payload("[1, 2]", PayloadSchema::ObjectList).is_err());
        assert!(parse_payload(r#"{"subject": "a", "relation": "", "object": "b"}"#, PayloadSchema::Triple).is_err());
        assert!(parse_payload("[\"x\", 1]", PayloadSchema::StringList).is_err());
        assert!(parse_payload("   ", PayloadSchema::Text).is_err());
        assert!(parse_payload(r#"{"entities": []}"#, PayloadSchema::SceneGraphBundle).is_err());
    }

    #[test]
    fn text_payload_is_trimmed() {
        assert_eq!(parse_payload("  black \n", PayloadSchema::Text).unwrap(), json!("black"));
        assert_eq!(parse_payload("```\nblack\n```", PayloadSchema::Text).unwrap(), json!("black"));
    }

    #[test]
    fn examples_conform() {
        for s in [
            PayloadSchema::Text,
            PayloadSchema::Triple,
            PayloadSchema::QaPair,
            PayloadSchema::ObjectList,
            PayloadSchema::StringList,
            PayloadSchema::SceneGraphBundle,
        ] {
            parse_payload(s.example_completion(), s).unwrap();
        }
    }
}
