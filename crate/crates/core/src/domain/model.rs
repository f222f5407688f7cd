use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DomainError;

/// Body part or preference an attribute describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum BodyTarget {
    Arms,
    Legs,
    Feet,
    Back,
    Chest,
    Hands,
    Eyes,
    Ears,
    Brain,
    UserPreference,
}

impl BodyTarget {
    pub const ALL: [BodyTarget; 10] = [
        BodyTarget::Arms,
        BodyTarget::Legs,
        BodyTarget::Feet,
        BodyTarget::Back,
        BodyTarget::Chest,
        BodyTarget::Hands,
        BodyTarget::Eyes,
        BodyTarget::Ears,
        BodyTarget::Brain,
        BodyTarget::UserPreference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BodyTarget::Arms => "arms",
            BodyTarget::Legs => "legs",
            BodyTarget::Feet => "feet",
            BodyTarget::Back => "back",
            BodyTarget::Chest => "chest",
            BodyTarget::Hands => "hands",
            BodyTarget::Eyes => "eyes",
            BodyTarget::Ears => "ears",
            BodyTarget::Brain => "brain",
            BodyTarget::UserPreference => "user_preference",
        }
    }
}

impl fmt::Display for BodyTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BodyTarget {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BodyTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                DomainError::violation("target", format!("unknown body target {s:?}"))
            })
    }
}

/// One movement a person performs and how it is affected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct UserAttribute {
    pub movement: String,
    pub effect: String,
    pub frequent: bool,
    pub target: BodyTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl UserAttribute {
    pub fn new(
        movement: impl Into<String>,
        effect: impl Into<String>,
        frequent: bool,
        target: BodyTarget,
    ) -> Self {
        Self {
            movement: movement.into(),
            effect: effect.into(),
            frequent,
            target,
            context: None,
        }
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = Some(context.into());
        self
    }

    /// Attributes are the same attribute when movement and target agree.
    pub fn identity(&self) -> (&str, BodyTarget) {
        (self.movement.as_str(), self.target)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.movement.trim().is_empty() {
            return Err(DomainError::violation("movement", "must not be empty"));
        }
        if self.effect.trim().is_empty() {
            return Err(DomainError::violation("effect", "must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Initial construction; does not advance the version.
    Create,
    /// A committed update; advances the version by one.
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ElicitationChannel {
    SelfDescription,
    Annotations,
    Feedback,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ElicitationEvent {
    pub kind: EventKind,
    pub channel: ElicitationChannel,
    pub timestamp: DateTime<Utc>,
    pub input_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct UserModel {
    pub id: String,
    pub version: u64,
    pub attributes: Vec<UserAttribute>,
    #[serde(default)]
    pub history: Vec<ElicitationEvent>,
}

impl UserModel {
    /// The generic model: no attributes, version 0.
    pub fn generic(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            version: 0,
            attributes: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn is_generic(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn update_count(&self) -> u64 {
        self.history
            .iter()
            .filter(|e| e.kind == EventKind::Update)
            .count() as u64
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.trim().is_empty() {
            return Err(DomainError::violation("id", "must not be empty"));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            a.validate().map_err(|e| prefix(e, &format!("attributes[{i}]")))?;
        }
        let updates = self.update_count();
        if self.version != updates {
            return Err(DomainError::violation(
                "version",
                format!("version {} but {} committed update events", self.version, updates),
            ));
        }
        Ok(())
    }
}

fn prefix(err: DomainError, at: &str) -> DomainError {
    match err {
        DomainError::SchemaViolation { path, message } => DomainError::SchemaViolation {
            path: format!("{at}.{path}"),
            message,
        },
        other => other,
    }
}

/// Parses and validates a serialized user model, naming the offending path on failure.
pub fn validate_user_model(document: &str) -> Result<UserModel, DomainError> {
    let root: Value = serde_json::from_str(document)
        .map_err(|e| DomainError::MalformedDocument(e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| DomainError::violation("$", "expected an object"))?;
    check_keys(obj, "", &["id", "version", "attributes", "history"], &["id", "version", "attributes"])?;

    let id = expect_str(&obj["id"], "id")?;
    if id.trim().is_empty() {
        return Err(DomainError::violation("id", "must not be empty"));
    }
    let version = obj["version"]
        .as_u64()
        .ok_or_else(|| DomainError::violation("version", "expected a non-negative integer"))?;

    let attrs = obj["attributes"]
        .as_array()
        .ok_or_else(|| DomainError::violation("attributes", "expected an array"))?;
    let mut attributes = Vec::with_capacity(attrs.len());
    for (i, a) in attrs.iter().enumerate() {
        attributes.push(parse_attribute(a, &format!("attributes[{i}]"))?);
    }

    let mut history = Vec::new();
    if let Some(h) = obj.get("history") {
        let events = h
            .as_array()
            .ok_or_else(|| DomainError::violation("history", "expected an array"))?;
        for (i, e) in events.iter().enumerate() {
            let path = format!("history[{i}]");
            let event: ElicitationEvent = serde_json::from_value(e.clone())
                .map_err(|err| DomainError::violation(path, err.to_string()))?;
            history.push(event);
        }
    }

    let model = UserModel {
        id: id.to_string(),
        version,
        attributes,
        history,
    };
    model.validate()?;
    Ok(model)
}

pub(crate) fn parse_attribute(value: &Value, path: &str) -> Result<UserAttribute, DomainError> {
    let obj = value
        .as_object()
        .ok_or_else(|| DomainError::violation(path, "expected an object"))?;
    check_keys(
        obj,
        path,
        &["movement", "effect", "frequent", "target", "context"],
        &["movement", "effect", "frequent", "target"],
    )?;
    let movement = expect_str(&obj["movement"], &format!("{path}.movement"))?;
    let effect = expect_str(&obj["effect"], &format!("{path}.effect"))?;
    let frequent = obj["frequent"]
        .as_bool()
        .ok_or_else(|| DomainError::violation(format!("{path}.frequent"), "expected a boolean"))?;
    let target_path = format!("{path}.target");
    let target: BodyTarget = expect_str(&obj["target"], &target_path)?
        .parse()
        .map_err(|e| match e {
            DomainError::SchemaViolation { message, .. } => {
                DomainError::violation(target_path.clone(), message)
            }
            other => other,
        })?;
    let context = match obj.get("context") {
        None | Some(Value::Null) => None,
        Some(v) => Some(expect_str(v, &format!("{path}.context"))?.to_string()),
    };
    let attr = UserAttribute {
        movement: movement.to_string(),
        effect: effect.to_string(),
        frequent,
        target,
        context,
    };
    attr.validate().map_err(|e| prefix(e, path))?;
    Ok(attr)
}

fn check_keys(
    obj: &serde_json::Map<String, Value>,
    path: &str,
    allowed: &[&str],
    required: &[&str],
) -> Result<(), DomainError> {
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    for k in required {
        if !obj.contains_key(*k) {
            return Err(DomainError::violation(join(k), "missing required field"));
        }
    }
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(DomainError::violation(join(k), "unknown field"));
    }
    Ok(())
}

fn expect_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, DomainError> {
    v.as_str()
        .ok_or_else(|| DomainError::violation(path, "expected a string"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AttributeChange {
    pub before: UserAttribute,
    pub after: UserAttribute,
}

/// Attribute-level difference between two user models.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ModelDiff {
    pub added: Vec<UserAttribute>,
    pub removed: Vec<UserAttribute>,
    pub changed: Vec<AttributeChange>,
}

impl ModelDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }

    /// Applies the diff to `attributes`. The result has the attribute multiset
    /// of the diff's target; order is not preserved.
    pub fn apply(&self, attributes: &[UserAttribute]) -> Vec<UserAttribute> {
        let mut out: Vec<Option<UserAttribute>> = attributes.iter().cloned().map(Some).collect();
        let mut take = |target: &UserAttribute| {
            if let Some(slot) = out.iter_mut().find(|s| s.as_ref() == Some(target)) {
                *slot = None;
            }
        };
        for r in &self.removed {
            take(r);
        }
        for c in &self.changed {
            take(&c.before);
        }
        let mut result: Vec<UserAttribute> = out.into_iter().flatten().collect();
        result.extend(self.changed.iter().map(|c| c.after.clone()));
        result.extend(self.added.iter().cloned());
        result
    }
}

/// Diffs attribute lists keyed on `(movement, target)`. Repeated keys pair up
/// in order of appearance.
pub fn diff_user_models(a: &UserModel, b: &UserModel) -> ModelDiff {
    diff_attributes(&a.attributes, &b.attributes)
}

pub(crate) fn diff_attributes(a: &[UserAttribute], b: &[UserAttribute]) -> ModelDiff {
    let mut by_key: HashMap<(&str, BodyTarget), VecDeque<usize>> = HashMap::new();
    for (i, attr) in a.iter().enumerate() {
        by_key.entry(attr.identity()).or_default().push_back(i);
    }
    let mut diff = ModelDiff::default();
    for attr in b {
        match by_key.get_mut(&attr.identity()).and_then(|q| q.pop_front()) {
            Some(i) if a[i] == *attr => {}
            Some(i) => diff.changed.push(AttributeChange {
                before: a[i].clone(),
                after: attr.clone(),
            }),
            None => diff.added.push(attr.clone()),
        }
    }
    let mut leftover: Vec<usize> = by_key.into_values().flatten().collect();
    leftover.sort_unstable();
    diff.removed = leftover.into_iter().map(|i| a[i].clone()).collect();
    diff
}
