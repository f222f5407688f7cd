use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DomainError, MaskRle};

const RASTER_TYPES: [&str; 6] = [
    "image/png",
    "image/jpeg",
    "image/gif",
    "image/webp",
    "image/bmp",
    "image/tiff",
];

/// An image of a built environment plus what the person intends to do there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentInput {
    pub image: Vec<u8>,
    pub media_type: String,
    pub env_description: String,
    pub intent: Option<String>,
}

impl EnvironmentInput {
    pub fn new(image: Vec<u8>, media_type: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            image,
            media_type: media_type.into(),
            env_description: description.into(),
            intent: None,
        }
    }

    pub fn with_intent(mut self, intent: impl Into<String>) -> Self {
        self.intent = Some(intent.into());
        self
    }

    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(&self.image)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.image.is_empty() {
            return Err(DomainError::violation("image", "payload is empty"));
        }
        if !RASTER_TYPES.contains(&self.media_type.as_str()) {
            return Err(DomainError::violation(
                "media_type",
                format!("{:?} is not a raster image type", self.media_type),
            ));
        }
        Ok(())
    }

    pub fn reference(&self) -> EnvironmentRef {
        EnvironmentRef {
            digest: self.digest(),
            media_type: self.media_type.clone(),
            description: self.env_description.clone(),
            intent: self.intent.clone(),
        }
    }
}

/// Guesses a raster media type from magic bytes.
pub fn sniff_media_type(bytes: &[u8]) -> Option<&'static str> {
    match image::guess_format(bytes).ok()? {
        image::ImageFormat::Png => Some("image/png"),
        image::ImageFormat::Jpeg => Some("image/jpeg"),
        image::ImageFormat::Gif => Some("image/gif"),
        image::ImageFormat::WebP => Some("image/webp"),
        image::ImageFormat::Bmp => Some("image/bmp"),
        image::ImageFormat::Tiff => Some("image/tiff"),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct EnvironmentRef {
    pub digest: String,
    pub media_type: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct SegmentLabel {
    pub label_id: u32,
    pub name: String,
    pub mask: MaskRle,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(transparent)]
pub struct MotionPrimitive(pub String);

impl MotionPrimitive {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SubtaskLocation {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Subtask {
    pub name: String,
    pub desc: String,
    pub locations: Vec<SubtaskLocation>,
    pub primitives: Vec<MotionPrimitive>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Task {
    pub name: String,
    pub desc: String,
    #[serde(default)]
    pub subtasks: Vec<Subtask>,
}

impl Task {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.name.trim().is_empty() {
            return Err(DomainError::violation("name", "must not be empty"));
        }
        for (i, s) in self.subtasks.iter().enumerate() {
            if s.name.trim().is_empty() {
                return Err(DomainError::violation(
                    format!("subtasks[{i}].name"),
                    "must not be empty",
                ));
            }
            if s.primitives.is_empty() {
                return Err(DomainError::violation(
                    format!("subtasks[{i}].primitives"),
                    "at least one primitive required",
                ));
            }
            if let Some(j) = s.primitives.iter().position(|p| p.0.trim().is_empty()) {
                return Err(DomainError::violation(
                    format!("subtasks[{i}].primitives[{j}]"),
                    "must not be empty",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ConcernOrigin {
    ModelGenerated,
    UserAdded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generic,
    Personalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Unreviewed,
    Confirmed,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct FactCheck {
    pub exists_in_image: bool,
    pub object_correct: bool,
}

/// A located, named, reasoned accessibility issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Concern {
    pub id: String,
    pub name: String,
    pub reason: String,
    #[serde(default)]
    pub location: Option<u32>,
    #[serde(default)]
    pub source_tasks: BTreeSet<String>,
    pub origin: ConcernOrigin,
    #[serde(default)]
    pub model_kind: Option<ModelKind>,
    pub status: ReviewStatus,
    #[serde(default)]
    pub fact_check: Option<FactCheck>,
}

impl Concern {
    pub fn generated(
        id: impl Into<String>,
        name: impl Into<String>,
        reason: impl Into<String>,
        location: Option<u32>,
    ) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            reason: reason.into(),
            location,
            source_tasks: BTreeSet::new(),
            origin: ConcernOrigin::ModelGenerated,
            model_kind: None,
            status: ReviewStatus::Unreviewed,
            fact_check: None,
        }
    }

    pub fn user_added(id: impl Into<String>, name: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            origin: ConcernOrigin::UserAdded,
            ..Self::generated(id, name, reason, None)
        }
    }
}

/// Provider usage accumulated over one operation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct UsageStats {
    /// Chat and segmentation attempts, failed ones included.
    pub requests: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Seconds per request, in completion order.
    pub wall_latency: Vec<f64>,
    /// Batched embedding calls, tracked apart from `requests`.
    #[serde(default)]
    pub embedding_requests: u64,
}

impl UsageStats {
    pub fn one_request(prompt_tokens: u64, completion_tokens: u64, latency: f64) -> Self {
        Self {
            requests: 1,
            prompt_tokens,
            completion_tokens,
            wall_latency: vec![latency],
            embedding_requests: 0,
        }
    }

    pub fn absorb(&mut self, other: &UsageStats) {
        self.requests += other.requests;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.wall_latency.extend_from_slice(&other.wall_latency);
        self.embedding_requests += other.embedding_requests;
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct TaskFailure {
    pub task_name: String,
    pub error_kind: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ScanStatus {
    Complete,
    Partial,
    Failed,
}

impl ScanStatus {
    pub fn derive(has_failures: bool, has_output: bool) -> Self {
        match (has_failures, has_output) {
            (false, _) => ScanStatus::Complete,
            (true, true) => ScanStatus::Partial,
            (true, false) => ScanStatus::Failed,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScanStatus::Complete => "complete",
            ScanStatus::Partial => "partial",
            ScanStatus::Failed => "failed",
        }
    }
}

/// Full output of one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ScanRecord {
    pub id: String,
    pub env: EnvironmentRef,
    pub model_id: String,
    pub model_version: u64,
    pub labels: Vec<SegmentLabel>,
    pub tasks: Vec<Task>,
    pub concerns: Vec<Concern>,
    pub usage: UsageStats,
    pub failures: Vec<TaskFailure>,
    pub status: ScanStatus,
    pub created_at: DateTime<Utc>,
    /// Wall time of the whole scan, measured on the injected clock.
    pub elapsed_seconds: f64,
    /// Concerns dropped for citing a label that does not exist.
    #[serde(default)]
    pub dropped_concerns: u32,
    /// Prompt template name to content hash.
    #[serde(default)]
    pub templates: BTreeMap<String, String>,
}

impl ScanRecord {
    pub fn label(&self, id: u32) -> Option<&SegmentLabel> {
        self.labels.iter().find(|l| l.label_id == id)
    }

    pub fn concern(&self, id: &str) -> Option<&Concern> {
        self.concerns.iter().find(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let mut ids = HashSet::new();
        for (i, l) in self.labels.iter().enumerate() {
            let path = format!("labels[{i}]");
            if l.label_id < 1 {
                return Err(DomainError::violation(format!("{path}.label_id"), "must be >= 1"));
            }
            if !ids.insert(l.label_id) {
                return Err(DomainError::violation(format!("{path}.label_id"), "duplicate label id"));
            }
            l.mask.validate().map_err(|e| match e {
                DomainError::SchemaViolation { message, .. } => {
                    DomainError::violation(format!("{path}.mask.counts"), message)
                }
                other => other,
            })?;
            if l.mask.area() == 0 {
                return Err(DomainError::violation(format!("{path}.mask"), "mask has no on pixels"));
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate().map_err(|e| match e {
                DomainError::SchemaViolation { path, message } => {
                    DomainError::violation(format!("tasks[{i}].{path}"), message)
                }
                other => other,
            })?;
        }
        let mut concern_ids = HashSet::new();
        for (i, c) in self.concerns.iter().enumerate() {
            let path = format!("concerns[{i}]");
            if !concern_ids.insert(c.id.as_str()) {
                return Err(DomainError::violation(format!("{path}.id"), "duplicate concern id"));
            }
            if c.name.trim().is_empty() || c.reason.trim().is_empty() {
                return Err(DomainError::violation(path, "name and reason must not be empty"));
            }
            if let Some(loc) = c.location {
                if !ids.contains(&loc) {
                    return Err(DomainError::violation(
                        format!("{path}.location"),
                        format!("label {loc} does not exist in this scan"),
                    ));
                }
            }
        }
        let expected = ScanStatus::derive(
            !self.failures.is_empty(),
            !self.concerns.is_empty() || !self.tasks.is_empty(),
        );
        if self.status != expected {
            return Err(DomainError::violation(
                "status",
                format!("status {:?} inconsistent with failures/output", self.status),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Feedback {
    pub concern_id: String,
    pub is_concern: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn record() -> ScanRecord {
        ScanRecord {
            id: "s".into(),
            env: EnvironmentRef {
                digest: "d".into(),
                media_type: "image/png".into(),
                description: "bathroom".into(),
                intent: None,
            },
            model_id: "m".into(),
            model_version: 0,
            labels: vec![SegmentLabel {
                label_id: 1,
                name: "sink".into(),
                mask: MaskRle::rect(4, 4, 0, 0, 2, 2),
            }],
            tasks: vec![],
            concerns: vec![Concern::generated("c1", "High Mirror", "too high", Some(1))],
            usage: UsageStats::default(),
            failures: vec![],
            status: ScanStatus::Complete,
            created_at: Utc.timestamp_opt(0, 0).unwrap(),
            elapsed_seconds: 0.0,
            dropped_concerns: 0,
            templates: BTreeMap::new(),
        }
    }

    #[test]
    fn valid_record_passes_and_round_trips() {
        let r = record();
        r.validate().unwrap();
        let s = super::super::canonical_json(&r);
        let back: ScanRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        assert_eq!(super::super::canonical_json(&back), s);
    }

    #[test]
    fn dangling_location_rejected() {
        let mut r = record();
        r.concerns[0].location = Some(7);
        assert!(matches!(
            r.validate(),
            Err(DomainError::SchemaViolation { path, .. }) if path == "concerns[0].location"
        ));
    }

    #[test]
    fn status_invariant() {
        let mut r = record();
        r.failures.push(TaskFailure {
            task_name: "t".into(),
            error_kind: "transport".into(),
            attempts: 3,
        });
        assert!(r.validate().is_err());
        r.status = ScanStatus::Partial;
        r.validate().unwrap();
        r.concerns.clear();
        assert!(r.validate().is_err());
        r.status = ScanStatus::Failed;
        r.validate().unwrap();
    }

    #[test]
    fn environment_validation() {
        assert!(EnvironmentInput::new(vec![], "image/png", "x").validate().is_err());
        assert!(EnvironmentInput::new(vec![1], "text/plain", "x").validate().is_err());
        EnvironmentInput::new(vec![1], "image/jpeg", "x").validate().unwrap();
    }

    #[test]
    fn usage_absorbs() {
        let mut u = UsageStats::one_request(10, 5, 0.5);
        u.absorb(&UsageStats::one_request(1, 2, 1.0));
        assert_eq!(u.requests, 2);
        assert_eq!(u.total_tokens(), 18);
        assert_eq!(u.wall_latency, vec![0.5, 1.0]);
    }
}
