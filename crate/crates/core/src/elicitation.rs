//! Building and updating user models through the three elicitation
//! channels: a free-text self-description, annotations on an image, and
//! feedback on generated concerns.
//!
//! The chat provider produces attribute lists; versioning and atomicity are
//! enforced here. A failed update returns an error and leaves the input
//! model untouched.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::Clock;
use crate::digest::digest_json;
use crate::domain::{
    canonical_json, parse_attribute, BodyTarget, ElicitationChannel, ElicitationEvent, EventKind,
    Feedback, ScanRecord, UsageStats, UserAttribute, UserModel,
};
use crate::prompts::{self, Template, TemplateError};
use crate::providers::{
    ChatClient, ChatFailure, ChatRequest, ImageAttachment, ProviderError, ResponseSchema, Schema, Turn,
};

#[derive(Debug, Error)]
pub enum ElicitationError {
    #[error("input is empty")]
    EmptyInput,
    #[error("at least one annotation is required")]
    NoAnnotations,
    #[error("concern {0} does not exist in the scan")]
    UnknownConcern(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("provider failure: {0}")]
    Provider(ChatFailure),
}

impl ElicitationError {
    pub fn provider_error(&self) -> Option<&ProviderError> {
        match self {
            ElicitationError::Provider(f) => Some(&f.error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub name: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AnnotationInput {
    pub image: ImageAttachment,
    pub annotations: Vec<Annotation>,
}

/// A concern the user wrote themselves, passed to a model update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct NewConcern {
    pub name: String,
    pub reason: String,
}

/// Attributes returned by one elicitation call.
#[derive(Debug, Clone)]
pub struct Elicited {
    pub attributes: Vec<UserAttribute>,
    pub usage: UsageStats,
    pub input_digest: String,
    pub template_hash: String,
}

pub fn attributes_schema() -> ResponseSchema {
    let targets: Vec<&str> = BodyTarget::ALL.iter().map(|t| t.as_str()).collect();
    ResponseSchema::new(
        "user_attributes",
        Schema::object([Schema::array(Schema::object([
            Schema::text().req("movement"),
            Schema::text().req("effect"),
            Schema::Boolean.req("frequent"),
            Schema::one_of(targets).req("target"),
            Schema::string().nullable().opt("context"),
        ]))
        .req("attributes")]),
    )
}

pub fn new_concern_schema() -> ResponseSchema {
    ResponseSchema::new(
        "new_concern",
        Schema::object([Schema::text().req("name"), Schema::text().req("reason")]),
    )
}

fn targets_list() -> String {
    BodyTarget::ALL
        .iter()
        .map(|t| t.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

fn parse_attributes(value: &Value) -> Result<Vec<UserAttribute>, String> {
    value["attributes"]
        .as_array()
        .ok_or_else(|| "attributes must be an array".to_string())?
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut a = a.clone();
            if a.get("context").is_some_and(|c| c.as_str().is_some_and(|s| s.trim().is_empty())) {
                a.as_object_mut().expect("schema-checked object").remove("context");
            }
            parse_attribute(&a, &format!("$.attributes[{i}]")).map_err(|e| e.to_string())
        })
        .collect()
}

async fn ask_attributes(
    chat: &ChatClient,
    template: Template,
    prompt: String,
    image: Option<ImageAttachment>,
    input_digest: String,
) -> Result<Elicited, ElicitationError> {
    let mut turn = Turn::user(prompt);
    if let Some(img) = image {
        turn = turn.with_image(img);
    }
    let req = ChatRequest::new(prompts::SYSTEM.text, attributes_schema()).turn(turn);
    let reply = chat
        .chat_structured_checked(req, |v| parse_attributes(v).map(|_| ()))
        .await
        .map_err(ElicitationError::Provider)?;
    chat.end_conversation(&reply.conversation_id);
    let attributes = parse_attributes(&reply.value).expect("checked in the repair loop");
    Ok(Elicited {
        attributes,
        usage: reply.usage,
        input_digest,
        template_hash: template.hash(),
    })
}

/// Attributes from a free-text description of abilities and preferences.
pub async fn elicit_from_text(description: &str, chat: &ChatClient) -> Result<Elicited, ElicitationError> {
    if description.trim().is_empty() {
        return Err(ElicitationError::EmptyInput);
    }
    let prompt = prompts::SELF_DESCRIPTION.render(&[
        ("description", description.trim()),
        ("targets", &targets_list()),
    ])?;
    let digest = digest_json(&json!({"self_description": description}));
    ask_attributes(chat, prompts::SELF_DESCRIPTION, prompt, None, digest).await
}

/// Attributes inferred from concerns the user annotated on an image.
pub async fn elicit_from_annotations(
    input: &AnnotationInput,
    chat: &ChatClient,
) -> Result<Elicited, ElicitationError> {
    if input.annotations.is_empty() {
        return Err(ElicitationError::NoAnnotations);
    }
    for (i, a) in input.annotations.iter().enumerate() {
        if a.name.trim().is_empty() || a.reason.trim().is_empty() {
            return Err(ElicitationError::InvalidInput(format!(
                "annotations[{i}] needs a name and a reason"
            )));
        }
    }
    let lines: Vec<String> = input
        .annotations
        .iter()
        .map(|a| match &a.location {
            Some(loc) => format!("- {}: {} (at {loc})", a.name, a.reason),
            None => format!("- {}: {}", a.name, a.reason),
        })
        .collect();
    let prompt = prompts::ANNOTATIONS.render(&[
        ("annotations", &lines.join("\n")),
        ("targets", &targets_list()),
    ])?;
    let digest = digest_json(&json!({
        "image": input.image.digest(),
        "annotations": input.annotations,
    }));
    ask_attributes(chat, prompts::ANNOTATIONS, prompt, Some(input.image.clone()), digest).await
}

/// A fresh model at version 0 carrying one creation event.
pub fn create_model(
    id: impl Into<String>,
    channel: ElicitationChannel,
    elicited: Elicited,
    clock: &dyn Clock,
) -> UserModel {
    UserModel {
        id: id.into(),
        version: 0,
        attributes: elicited.attributes,
        history: vec![ElicitationEvent {
            kind: EventKind::Create,
            channel,
            timestamp: clock.now(),
            input_digest: elicited.input_digest,
            template_hash: Some(elicited.template_hash),
        }],
    }
}

#[derive(Debug, Clone)]
pub struct FeedbackUpdate {
    pub model: UserModel,
    pub usage: UsageStats,
    /// False when there was nothing to merge and no provider call was made.
    pub called_provider: bool,
}

fn feedback_lines(scan: &ScanRecord, feedback: &[Feedback]) -> String {
    if feedback.is_empty() {
        return "(none)".into();
    }
    feedback
        .iter()
        .map(|f| {
            let c = scan.concern(&f.concern_id).expect("checked by caller");
            let verdict = if f.is_concern { "is a concern" } else { "not a concern" };
            match f.text.as_deref().map(str::trim).filter(|t| !t.is_empty()) {
                Some(t) => format!("- {} ({}): {verdict}. User says: {t}", c.name, c.reason),
                None => format!("- {} ({}): {verdict}.", c.name, c.reason),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Produces the next version of `model` from feedback on `scan`.
pub async fn apply_feedback(
    model: &UserModel,
    scan: &ScanRecord,
    feedback: &[Feedback],
    new_concerns: &[NewConcern],
    chat: &ChatClient,
    clock: &dyn Clock,
) -> Result<FeedbackUpdate, ElicitationError> {
    for f in feedback {
        if scan.concern(&f.concern_id).is_none() {
            return Err(ElicitationError::UnknownConcern(f.concern_id.clone()));
        }
    }
    let input_digest = digest_json(&json!({
        "scan_id": scan.id,
        "feedback": feedback,
        "new_concerns": new_concerns,
    }));
    let template = prompts::FEEDBACK_UPDATE;
    let (attributes, usage, called_provider) = if feedback.is_empty() && new_concerns.is_empty() {
        (model.attributes.clone(), UsageStats::default(), false)
    } else {
        let added = if new_concerns.is_empty() {
            "(none)".to_string()
        } else {
            new_concerns
                .iter()
                .map(|c| format!("- {}: {}", c.name, c.reason))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = template.render(&[
            ("user_model", canonical_json(&model.attributes).trim_end()),
            ("env_description", &scan.env.description),
            ("feedback", &feedback_lines(scan, feedback)),
            ("new_concerns", &added),
            ("targets", &targets_list()),
        ])?;
        let e = ask_attributes(chat, template, prompt, None, input_digest.clone()).await?;
        (e.attributes, e.usage, true)
    };
    let mut history = model.history.clone();
    history.push(ElicitationEvent {
        kind: EventKind::Update,
        channel: ElicitationChannel::Feedback,
        timestamp: clock.now(),
        input_digest,
        template_hash: called_provider.then(|| template.hash()),
    });
    Ok(FeedbackUpdate {
        model: UserModel {
            id: model.id.clone(),
            version: model.version + 1,
            attributes,
            history,
        },
        usage,
        called_provider,
    })
}

/// Turns free text such as "The outlet seems a bit tall" into a named concern.
pub async fn normalize_concern(
    text: &str,
    env_description: &str,
    chat: &ChatClient,
) -> Result<(NewConcern, UsageStats), ElicitationError> {
    if text.trim().is_empty() {
        return Err(ElicitationError::EmptyInput);
    }
    let prompt = prompts::NEW_CONCERN.render(&[("env_description", env_description), ("text", text.trim())])?;
    let req = ChatRequest::new(prompts::SYSTEM.text, new_concern_schema()).turn(Turn::user(prompt));
    let reply = chat.chat_structured(req).await.map_err(ElicitationError::Provider)?;
    chat.end_conversation(&reply.conversation_id);
    Ok((
        NewConcern {
            name: reply.value["name"].as_str().unwrap_or_default().trim().to_string(),
            reason: reply.value["reason"].as_str().unwrap_or_default().trim().to_string(),
        },
        reply.usage,
    ))
}
