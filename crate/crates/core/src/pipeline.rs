//! One scan: segmentation, task identification, decomposition into
//! subtasks and motion primitives, per-task concern identification fanned
//! out in parallel, then merging of near-duplicate concerns.
//!
//! Provider failures never abort a scan. They are recorded on the returned
//! [`ScanRecord`], whose status is derived from what survived.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::{seconds_between, Clock};
use crate::digest::digest_json;
use crate::domain::{
    canonical_json, Concern, DomainError, EnvironmentInput, ModelKind, MotionPrimitive, ScanRecord, ScanStatus,
    SegmentLabel, Subtask, SubtaskLocation, Task, TaskFailure, UsageStats, UserModel,
};
use crate::merge::{self, MergeError};
use crate::prompts::{self, TemplateError};
use crate::providers::{
    marks, segment_image, ChatClient, ChatFailure, ChatRequest, EmbeddingBackend, ImageAttachment, ProviderError,
    ResponseSchema, Schema, Segmenter, Turn,
};

pub const SEGMENTATION_STEP: &str = "segmentation";
pub const TASKS_STEP: &str = "task_identification";
pub const DECOMPOSITION_STEP: &str = "task_decomposition";
pub const MERGE_STEP: &str = "concern_merge";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Most concern requests in flight at once.
    pub parallelism: usize,
    pub similarity_threshold: f64,
    pub max_tasks: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            parallelism: 8,
            similarity_threshold: merge::DEFAULT_THRESHOLD,
            max_tasks: 8,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.parallelism < 1 {
            return Err("parallelism must be at least 1".into());
        }
        if self.max_tasks < 1 {
            return Err("max_tasks must be at least 1".into());
        }
        merge::check_threshold(self.similarity_threshold).map_err(|e| e.to_string())
    }
}

/// Handles to the three services a scan uses.
#[derive(Clone)]
pub struct ScanProviders {
    pub chat: Arc<ChatClient>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub segmenter: Arc<dyn Segmenter>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid scan input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// A step that failed, with the usage it consumed.
#[derive(Debug)]
pub struct StepFailure {
    pub error: ProviderError,
    pub attempts: u32,
    pub usage: UsageStats,
}

impl From<ChatFailure> for StepFailure {
    fn from(f: ChatFailure) -> Self {
        Self {
            error: f.error,
            attempts: f.attempts,
            usage: f.usage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskStub {
    pub name: String,
    pub desc: String,
}

#[derive(Debug)]
pub struct IdentifiedTasks {
    pub tasks: Vec<TaskStub>,
    pub conversation_id: String,
    pub usage: UsageStats,
}

pub fn tasks_schema() -> ResponseSchema {
    ResponseSchema::new(
        "tasks",
        Schema::object([Schema::array(Schema::object([
            Schema::text().req("name"),
            Schema::string().req("desc"),
        ]))
        .req("tasks")]),
    )
}

pub fn decomposition_schema() -> ResponseSchema {
    let location = Schema::object([Schema::text().req("name"), Schema::string().req("reason")]);
    let subtask = Schema::object([
        Schema::text().req("name"),
        Schema::string().req("desc"),
        Schema::array(location).req("locations"),
        Schema::non_empty_array(Schema::text()).req("primitives"),
    ]);
    ResponseSchema::new(
        "decomposition",
        Schema::object([Schema::array(Schema::object([
            Schema::text().req("name"),
            Schema::non_empty_array(subtask).req("subtasks"),
        ]))
        .req("tasks")]),
    )
}

pub fn concerns_schema() -> ResponseSchema {
    ResponseSchema::new(
        "concerns",
        Schema::object([Schema::array(Schema::object([
            Schema::text().req("name"),
            Schema::text().req("reason"),
            Schema::min_integer(1).nullable().req("location"),
        ]))
        .req("concerns")]),
    )
}

fn unique_names(value: &Value) -> Result<(), String> {
    let mut seen = HashSet::new();
    for t in value["tasks"].as_array().into_iter().flatten() {
        let name = t["name"].as_str().unwrap_or_default().trim().to_string();
        if !seen.insert(name.clone()) {
            return Err(format!("task name {name:?} appears twice"));
        }
    }
    Ok(())
}

/// Asks for the tasks a person would carry out in the environment.
pub async fn identify_tasks(
    env: &EnvironmentInput,
    chat: &ChatClient,
    max_tasks: usize,
) -> Result<IdentifiedTasks, StepFailure> {
    let max = max_tasks.to_string();
    let prompt = prompts::TASKS
        .render(&[
            ("env_description", env.env_description.trim()),
            ("intent", env.intent.as_deref().unwrap_or("not stated")),
            ("max_tasks", &max),
        ])
        .expect("tasks template placeholders");
    let image = ImageAttachment::new(env.media_type.clone(), env.image.clone());
    let req = ChatRequest::new(prompts::SYSTEM.text, tasks_schema()).turn(Turn::user(prompt).with_image(image));
    let reply = chat.chat_structured_checked(req, unique_names).await?;
    let tasks = reply.value["tasks"]
        .as_array()
        .expect("schema-checked")
        .iter()
        .take(max_tasks)
        .map(|t| TaskStub {
            name: t["name"].as_str().unwrap_or_default().trim().to_string(),
            desc: t["desc"].as_str().unwrap_or_default().trim().to_string(),
        })
        .collect();
    Ok(IdentifiedTasks {
        tasks,
        conversation_id: reply.conversation_id,
        usage: reply.usage,
    })
}

fn parse_decomposition(value: &Value, stubs: &[TaskStub]) -> Result<Vec<Task>, String> {
    let items = value["tasks"].as_array().ok_or("tasks must be an array")?;
    let names: Vec<&str> = items.iter().map(|t| t["name"].as_str().unwrap_or_default().trim()).collect();
    let expected: Vec<&str> = stubs.iter().map(|s| s.name.as_str()).collect();
    if names != expected {
        return Err(format!("tasks must be exactly {expected:?} in that order, found {names:?}"));
    }
    Ok(items
        .iter()
        .zip(stubs)
        .map(|(t, stub)| Task {
            name: stub.name.clone(),
            desc: stub.desc.clone(),
            subtasks: t["subtasks"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|s| Subtask {
                    name: s["name"].as_str().unwrap_or_default().trim().to_string(),
                    desc: s["desc"].as_str().unwrap_or_default().trim().to_string(),
                    locations: s["locations"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .map(|l| SubtaskLocation {
                            name: l["name"].as_str().unwrap_or_default().trim().to_string(),
                            reason: l["reason"].as_str().unwrap_or_default().trim().to_string(),
                        })
                        .collect(),
                    primitives: s["primitives"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .map(|p| MotionPrimitive::new(p.as_str().unwrap_or_default().trim()))
                        .collect(),
                })
                .collect(),
        })
        .collect())
}

/// Breaks task stubs into subtasks, continuing the task-identification conversation.
pub async fn decompose_tasks(
    stubs: &[TaskStub],
    conversation_id: &str,
    chat: &ChatClient,
) -> Result<(Vec<Task>, UsageStats), StepFailure> {
    let listing: Vec<String> = stubs.iter().map(|s| format!("- {}: {}", s.name, s.desc)).collect();
    let prompt = prompts::DECOMPOSITION
        .render(&[("tasks", &listing.join("\n"))])
        .expect("decomposition template placeholders");
    let req = ChatRequest::new(prompts::SYSTEM.text, decomposition_schema())
        .turn(Turn::user(prompt))
        .continuing(conversation_id);
    let reply = chat
        .chat_structured_checked(req, |v| parse_decomposition(v, stubs).map(|_| ()))
        .await?;
    let tasks = parse_decomposition(&reply.value, stubs).expect("checked in the repair loop");
    Ok((tasks, reply.usage))
}

/// Concerns for one task, before merging.
#[derive(Debug)]
pub struct TaskConcerns {
    pub concerns: Vec<Concern>,
    /// Concerns discarded for citing a label that does not exist.
    pub dropped: u32,
    pub usage: UsageStats,
}

fn label_listing(labels: &[SegmentLabel]) -> String {
    if labels.is_empty() {
        return "(no regions)".into();
    }
    labels
        .iter()
        .map(|l| format!("{}: {}", l.label_id, l.name))
        .collect::<Vec<_>>()
        .join("\n")
}

fn subtask_listing(task: &Task) -> String {
    if task.subtasks.is_empty() {
        return "(none)".into();
    }
    task.subtasks
        .iter()
        .map(|s| {
            let places: Vec<&str> = s.locations.iter().map(|l| l.name.as_str()).collect();
            let prims: Vec<&str> = s.primitives.iter().map(|p| p.as_str()).collect();
            format!(
                "- {}: {} (places: {}; motions: {})",
                s.name,
                s.desc,
                if places.is_empty() { "unspecified".into() } else { places.join(", ") },
                prims.join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks, in a fresh conversation, what would stop this user completing `task`.
/// Concern ids are `t{task_index}c{n}`.
pub async fn identify_concerns_for_task(
    task_index: usize,
    task: &Task,
    model: &UserModel,
    marked_image: &ImageAttachment,
    labels: &[SegmentLabel],
    chat: &ChatClient,
) -> Result<TaskConcerns, StepFailure> {
    let prompt = prompts::CONCERNS
        .render(&[
            ("labels", &label_listing(labels)),
            ("task_name", &task.name),
            ("task_desc", &task.desc),
            ("subtasks", &subtask_listing(task)),
            ("user_model", canonical_json(&model.attributes).trim_end()),
        ])
        .expect("concerns template placeholders");
    let req = ChatRequest::new(prompts::SYSTEM.text, concerns_schema())
        .turn(Turn::user(prompt).with_image(marked_image.clone()));
    let reply = chat.chat_structured(req).await?;
    chat.end_conversation(&reply.conversation_id);

    let kind = if model.is_generic() {
        ModelKind::Generic
    } else {
        ModelKind::Personalized
    };
    let known: HashSet<u32> = labels.iter().map(|l| l.label_id).collect();
    let mut concerns = Vec::new();
    let mut dropped = 0;
    for c in reply.value["concerns"].as_array().expect("schema-checked") {
        let location = c["location"].as_u64().map(|l| l as u32);
        if let Some(l) = location {
            if !known.contains(&l) {
                tracing::warn!(task = %task.name, label = l, "concern cites an unknown label; dropped");
                dropped += 1;
                continue;
            }
        }
        let mut concern = Concern::generated(
            format!("t{task_index}c{}", concerns.len()),
            c["name"].as_str().unwrap_or_default().trim(),
            c["reason"].as_str().unwrap_or_default().trim(),
            location,
        );
        concern.source_tasks.insert(task.name.clone());
        concern.model_kind = Some(kind);
        concerns.push(concern);
    }
    Ok(TaskConcerns {
        concerns,
        dropped,
        usage: reply.usage,
    })
}

/// Deterministic scan id from what the scan was run on and when.
pub fn derive_scan_id(env: &EnvironmentInput, model: &UserModel, created_at: &str) -> String {
    let d = digest_json(&json!({
        "image": env.digest(),
        "description": env.env_description,
        "intent": env.intent,
        "model": model.id,
        "version": model.version,
        "created_at": created_at,
    }));
    format!("scan-{}", &d[..16])
}

fn template_hashes() -> BTreeMap<String, String> {
    [prompts::SYSTEM, prompts::TASKS, prompts::DECOMPOSITION, prompts::CONCERNS]
        .iter()
        .map(|t| (t.name.to_string(), t.hash()))
        .collect()
}

fn failure(step: &str, f: &StepFailure) -> TaskFailure {
    TaskFailure {
        task_name: step.to_string(),
        error_kind: f.error.kind().to_string(),
        attempts: f.attempts,
    }
}

/// Runs one scan. Only invalid input is an error; provider failures are
/// recorded on the returned record.
pub async fn run_scan(
    env: &EnvironmentInput,
    model: &UserModel,
    config: &ScanConfig,
    providers: &ScanProviders,
    clock: &dyn Clock,
    scan_id: Option<String>,
) -> Result<ScanRecord, PipelineError> {
    env.validate()?;
    model.validate()?;
    config.validate().map_err(PipelineError::InvalidInput)?;

    let started = clock.now();
    let mut record = ScanRecord {
        id: scan_id.unwrap_or_else(|| derive_scan_id(env, model, &started.to_rfc3339())),
        env: env.reference(),
        model_id: model.id.clone(),
        model_version: model.version,
        labels: Vec::new(),
        tasks: Vec::new(),
        concerns: Vec::new(),
        usage: UsageStats::default(),
        failures: Vec::new(),
        status: ScanStatus::Complete,
        created_at: started,
        elapsed_seconds: 0.0,
        dropped_concerns: 0,
        templates: template_hashes(),
    };
    let finish = |mut record: ScanRecord| {
        record.status = ScanStatus::derive(
            !record.failures.is_empty(),
            !record.tasks.is_empty() || !record.concerns.is_empty(),
        );
        record.elapsed_seconds = seconds_between(started, clock.now());
        record
    };

    let seg_start = clock.now();
    let seg = segment_image(providers.segmenter.as_ref(), &env.image).await;
    record
        .usage
        .absorb(&UsageStats::one_request(0, 0, seconds_between(seg_start, clock.now())));
    match seg {
        Ok(labels) => record.labels = labels,
        Err(error) => {
            tracing::warn!(%error, "segmentation failed");
            record.failures.push(TaskFailure {
                task_name: SEGMENTATION_STEP.into(),
                error_kind: error.kind().into(),
                attempts: 1,
            });
            return Ok(finish(record));
        }
    }

    let chat = providers.chat.as_ref();
    let identified = match identify_tasks(env, chat, config.max_tasks).await {
        Ok(t) => t,
        Err(f) => {
            record.usage.absorb(&f.usage);
            record.failures.push(failure(TASKS_STEP, &f));
            return Ok(finish(record));
        }
    };
    record.usage.absorb(&identified.usage);
    if identified.tasks.is_empty() {
        chat.end_conversation(&identified.conversation_id);
        return Ok(finish(record));
    }

    let decomposed = decompose_tasks(&identified.tasks, &identified.conversation_id, chat).await;
    chat.end_conversation(&identified.conversation_id);
    let tasks = match decomposed {
        Ok((tasks, usage)) => {
            record.usage.absorb(&usage);
            tasks
        }
        Err(f) => {
            record.usage.absorb(&f.usage);
            record.failures.push(failure(DECOMPOSITION_STEP, &f));
            return Ok(finish(record));
        }
    };
    record.tasks = tasks;

    let marked = match marks::render_marks_png(&env.image, &record.labels) {
        Ok(png) => ImageAttachment::new("image/png", png),
        Err(error) => {
            record.failures.push(TaskFailure {
                task_name: SEGMENTATION_STEP.into(),
                error_kind: error.kind().into(),
                attempts: 1,
            });
            return Ok(finish(record));
        }
    };

    let requests: Vec<_> = record
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| identify_concerns_for_task(i, task, model, &marked, &record.labels, chat))
        .collect();
    let results: Vec<Result<TaskConcerns, StepFailure>> = stream::iter(requests)
        .buffered(config.parallelism)
        .collect()
        .await;

    let mut raw = Vec::new();
    for (task, result) in record.tasks.iter().zip(results) {
        match result {
            Ok(tc) => {
                record.usage.absorb(&tc.usage);
                record.dropped_concerns += tc.dropped;
                raw.extend(tc.concerns);
            }
            Err(f) => {
                tracing::warn!(task = %task.name, error = %f.error, "concern request failed");
                record.usage.absorb(&f.usage);
                record.failures.push(failure(&task.name, &f));
            }
        }
    }

    if !raw.is_empty() {
        record.usage.embedding_requests += 1;
        match merge::dedup(&raw, providers.embedder.as_ref(), config.similarity_threshold).await {
            Ok(groups) => record.concerns = groups.into_iter().map(|g| g.representative).collect(),
            Err(e) => {
                tracing::warn!(error = %e, "concern merge failed; keeping unmerged concerns");
                let kind = match &e {
                    MergeError::Provider(p) => p.kind(),
                    _ => "merge",
                };
                record.failures.push(TaskFailure {
                    task_name: MERGE_STEP.into(),
                    error_kind: kind.into(),
                    attempts: 1,
                });
                record.concerns = raw;
            }
        }
    }
    Ok(finish(record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;
    use crate::domain::MaskRle;
    use crate::providers::{
        encode_png, FixtureSegmenter, HashEmbedder, ProviderConfig, ScriptFile, ScriptedChat,
    };
    use crate::digest::sha256_hex;

    fn image() -> Vec<u8> {
        encode_png(&image::RgbImage::from_pixel(8, 8, image::Rgb([200, 200, 200])))
    }

    fn providers(script: Value) -> ScanProviders {
        let png = image();
        let labels = vec![
            SegmentLabel {
                label_id: 1,
                name: "sink".into(),
                mask: MaskRle::rect(8, 8, 0, 0, 4, 4),
            },
            SegmentLabel {
                label_id: 2,
                name: "floor".into(),
                mask: MaskRle::rect(8, 8, 0, 4, 8, 8),
            },
        ];
        ScanProviders {
            chat: Arc::new(ChatClient::new(
                Arc::new(ScriptedChat::from_rules(ScriptFile::parse(&script.to_string()).unwrap())),
                ProviderConfig::scripted(),
            )),
            embedder: Arc::new(HashEmbedder::default()),
            segmenter: Arc::new(FixtureSegmenter::new().with(sha256_hex(&png), labels)),
        }
    }

    fn env() -> EnvironmentInput {
        EnvironmentInput::new(image(), "image/png", "a small bathroom")
    }

    fn decomposition(names: &[&str]) -> Value {
        json!({"tasks": names.iter().map(|n| json!({"name": n, "subtasks": [
            {"name": "s", "desc": "d", "locations": [{"name": "sink", "reason": "r"}], "primitives": ["reach"]}
        ]})).collect::<Vec<_>>()})
    }

    #[tokio::test]
    async fn no_tasks_gives_complete_empty_record() {
        let p = providers(json!({"rules": [{"schema": "tasks", "reply": {"tasks": []}}]}));
        let r = run_scan(&env(), &UserModel::generic("m"), &ScanConfig::default(), &p, &FixedClock::default(), None)
            .await
            .unwrap();
        assert_eq!(r.status, ScanStatus::Complete);
        assert!(r.concerns.is_empty());
        assert_eq!(r.usage.requests, 2);
        assert_eq!(r.usage.embedding_requests, 0);
        r.validate().unwrap();
    }

    #[tokio::test]
    async fn unknown_labels_are_dropped_and_counted() {
        let p = providers(json!({"rules": [
            {"schema": "tasks", "reply": {"tasks": [{"name": "Washing Up", "desc": "d"}]}},
            {"schema": "decomposition", "reply": decomposition(&["Washing Up"])},
            {"schema": "concerns", "reply": {"concerns": [
                {"name": "High Sink", "reason": "too high to reach", "location": 1},
                {"name": "Ghost", "reason": "not there", "location": 99},
                {"name": "Dim Lighting", "reason": "hard to see", "location": null},
            ]}},
        ]}));
        let r = run_scan(&env(), &UserModel::generic("m"), &ScanConfig::default(), &p, &FixedClock::default(), None)
            .await
            .unwrap();
        assert_eq!(r.dropped_concerns, 1);
        assert_eq!(r.concerns.len(), 2);
        assert_eq!(r.concerns[0].id, "t0c0");
        assert_eq!(r.concerns[0].model_kind, Some(ModelKind::Generic));
        assert_eq!(r.usage.requests, 4);
        assert_eq!(r.usage.embedding_requests, 1);
        r.validate().unwrap();
    }

    #[tokio::test]
    async fn task_identification_failure_fails_scan() {
        let p = providers(json!({"rules": [{"schema": "tasks", "error": "transport"}]}));
        let r = run_scan(&env(), &UserModel::generic("m"), &ScanConfig::default(), &p, &FixedClock::default(), None)
            .await
            .unwrap();
        assert_eq!(r.status, ScanStatus::Failed);
        assert_eq!(r.failures[0].task_name, TASKS_STEP);
        assert_eq!(r.failures[0].attempts, 3);
        assert_eq!(r.usage.requests, 4);
        r.validate().unwrap();
    }

    #[tokio::test]
    async fn decomposition_must_keep_task_names() {
        let p = providers(json!({"rules": [
            {"schema": "tasks", "reply": {"tasks": [{"name": "A", "desc": ""}]}},
            {"schema": "decomposition", "reply": decomposition(&["B"])},
        ]}));
        let r = run_scan(&env(), &UserModel::generic("m"), &ScanConfig::default(), &p, &FixedClock::default(), None)
            .await
            .unwrap();
        assert_eq!(r.status, ScanStatus::Failed);
        assert_eq!(r.failures[0].task_name, DECOMPOSITION_STEP);
    }

    #[tokio::test]
    async fn corrupt_image_fails_at_segmentation() {
        let p = providers(json!({"rules": []}));
        let bad = EnvironmentInput::new(b"not an image".to_vec(), "image/png", "x");
        let r = run_scan(&bad, &UserModel::generic("m"), &ScanConfig::default(), &p, &FixedClock::default(), None)
            .await
            .unwrap();
        assert_eq!(r.status, ScanStatus::Failed);
        assert_eq!(r.failures[0].error_kind, "unsupported_image");
        assert_eq!(r.usage.requests, 1);
    }

    #[tokio::test]
    async fn invalid_input_is_an_error() {
        let p = providers(json!({"rules": []}));
        let bad = EnvironmentInput::new(vec![], "image/png", "x");
        assert!(run_scan(&bad, &UserModel::generic("m"), &ScanConfig::default(), &p, &FixedClock::default(), None)
            .await
            .is_err());
        let cfg = ScanConfig {
            parallelism: 0,
            ..ScanConfig::default()
        };
        assert!(run_scan(&env(), &UserModel::generic("m"), &cfg, &p, &FixedClock::default(), None)
            .await
            .is_err());
    }
}
