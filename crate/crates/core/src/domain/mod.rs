//! Canonical data types shared by every module, with validation, canonical
//! JSON serialization and user-model diffing.
//!
//! All values are immutable once built and safe to share across tasks.

mod mask;
mod model;
mod scan;

pub use mask::MaskRle;
pub(crate) use model::parse_attribute;
pub use model::{
    diff_user_models, validate_user_model, AttributeChange, BodyTarget, ElicitationChannel,
    ElicitationEvent, EventKind, ModelDiff, UserAttribute, UserModel,
};
pub use scan::{
    sniff_media_type, Concern, ConcernOrigin, EnvironmentInput, EnvironmentRef, FactCheck, Feedback, ModelKind, MotionPrimitive,
    ReviewStatus, ScanRecord, ScanStatus, SegmentLabel, Subtask, SubtaskLocation, Task,
    TaskFailure, UsageStats,
};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
}

impl DomainError {
    pub(crate) fn violation(path: impl Into<String>, message: impl Into<String>) -> Self {
        DomainError::SchemaViolation {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Recursively rebuilds `value` with object keys in sorted order.
pub fn canonicalize(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, canonicalize(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Canonical serialization: sorted keys, two-space indentation, trailing newline.
pub fn canonical_json_bytes<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Vec<u8>> {
    let v = canonicalize(serde_json::to_value(value)?);
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(canonical_json_bytes(value).expect("domain values serialize"))
        .expect("serde_json emits UTF-8")
}

/// Parses a JSON document into `T`, reporting the failing path on type errors.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T, DomainError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| DomainError::MalformedDocument(e.to_string()))?;
    serde_json::from_value(value).map_err(|e| DomainError::violation("$", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_form_sorts_nested_keys() {
        let v = json!({"b": 1, "a": {"z": [ {"y": 1, "x": 2} ], "c": null}});
        let s = canonical_json(&v);
        assert_eq!(
            s,
            "{\n  \"a\": {\n    \"c\": null,\n    \"z\": [\n      {\n        \"x\": 2,\n        \"y\": 1\n      }\n    ]\n  },\n  \"b\": 1\n}\n"
        );
    }
}
