use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::schema::ResponseSchema;
use super::{imaging, ProviderConfig, ProviderError};
use crate::clock::{seconds_between, Clock, SystemClock};
use crate::digest::{digest_json, sha256_hex};
use crate::domain::UsageStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub media_type: String,
    pub data: Arc<Vec<u8>>,
}

impl ImageAttachment {
    pub fn new(media_type: impl Into<String>, data: Vec<u8>) -> Self {
        Self {
            media_type: media_type.into(),
            data: Arc::new(data),
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageAttachment>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn with_image(mut self, image: ImageAttachment) -> Self {
        self.images.push(image);
        self
    }
}

/// One structured exchange with the chat model.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub system: String,
    pub turns: Vec<Turn>,
    pub response_schema: ResponseSchema,
    /// Continue a prior exchange held by the same [`ChatClient`].
    pub conversation_id: Option<String>,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, schema: ResponseSchema) -> Self {
        Self {
            system: system.into(),
            turns: Vec::new(),
            response_schema: schema,
            conversation_id: None,
        }
    }

    pub fn turn(mut self, turn: Turn) -> Self {
        self.turns.push(turn);
        self
    }

    pub fn continuing(mut self, conversation_id: impl Into<String>) -> Self {
        self.conversation_id = Some(conversation_id.into());
        self
    }
}

/// The full message list a stateless backend receives for one attempt.
#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub system: String,
    pub messages: Vec<Turn>,
    pub schema: ResponseSchema,
}

impl BackendRequest {
    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
            .unwrap_or("")
    }
}

/// Digest identifying a backend request: system prompt, every message with
/// its image digests, and the response schema.
pub fn request_digest(req: &BackendRequest) -> String {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|t| {
            json!({
                "role": t.role,
                "text": t.text,
                "images": t.images.iter().map(|i| i.digest()).collect::<Vec<_>>(),
            })
        })
        .collect();
    digest_json(&json!({
        "system": req.system,
        "messages": messages,
        "schema": {"name": req.schema.name, "json": req.schema.schema.to_json_schema()},
    }))
}

/// Raw reply from one backend attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawReply {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn send(&self, request: &BackendRequest) -> Result<RawReply, ProviderError>;
}

#[derive(Debug, Clone)]
pub struct StructuredReply {
    pub value: Value,
    pub usage: UsageStats,
    pub conversation_id: String,
    pub attempts: u32,
}

/// A chat call that never produced a valid reply. Usage covers every attempt.
#[derive(Debug, Clone)]
pub struct ChatFailure {
    pub error: ProviderError,
    pub usage: UsageStats,
    pub attempts: u32,
}

impl std::fmt::Display for ChatFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} attempt(s)", self.error, self.attempts)
    }
}

impl std::error::Error for ChatFailure {}

/// Retrying, schema-checking chat client with conversation memory.
pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    config: ProviderConfig,
    limiter: Arc<Semaphore>,
    clock: Arc<dyn Clock>,
    conversations: Mutex<HashMap<String, Vec<Turn>>>,
}

impl ChatClient {
    pub fn new(backend: Arc<dyn ChatBackend>, config: ProviderConfig) -> Self {
        let limiter = Arc::new(Semaphore::new(config.max_concurrent.max(1)));
        Self {
            backend,
            config,
            limiter,
            clock: Arc::new(SystemClock),
            conversations: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub async fn chat_structured(&self, req: ChatRequest) -> Result<StructuredReply, ChatFailure> {
        self.chat_structured_checked(req, |_| Ok(())).await
    }

    /// Like [`chat_structured`](Self::chat_structured) with an extra semantic
    /// check run after the schema check. Failures of either feed the repair loop.
    pub async fn chat_structured_checked<F>(
        &self,
        req: ChatRequest,
        check: F,
    ) -> Result<StructuredReply, ChatFailure>
    where
        F: Fn(&Value) -> Result<(), String> + Send + Sync,
    {
        let mut usage = UsageStats::default();
        let prior = match &req.conversation_id {
            Some(id) => match self.conversations.lock().unwrap().get(id) {
                Some(history) => history.clone(),
                None => {
                    return Err(ChatFailure {
                        error: ProviderError::InvalidInput(format!("unknown conversation {id}")),
                        usage,
                        attempts: 0,
                    })
                }
            },
            None => Vec::new(),
        };
        let fresh = self.prepare_turns(&req.turns).map_err(|error| ChatFailure {
            error,
            usage: UsageStats::default(),
            attempts: 0,
        })?;

        let mut exchange = fresh.clone();
        let mut last_error = ProviderError::Transport("no attempt made".into());
        let max = self.config.max_attempts.max(1);
        for attempt in 1..=max {
            let request = BackendRequest {
                system: req.system.clone(),
                messages: prior.iter().chain(exchange.iter()).cloned().collect(),
                schema: req.response_schema.clone(),
            };
            let started = self.clock.now();
            let result = {
                let _permit = self.limiter.acquire().await.expect("limiter never closed");
                self.backend.send(&request).await
            };
            let latency = seconds_between(started, self.clock.now());
            match result {
                Ok(raw) => {
                    usage.absorb(&UsageStats::one_request(
                        raw.prompt_tokens,
                        raw.completion_tokens,
                        latency,
                    ));
                    match parse_and_check(&raw.content, &req.response_schema, &check) {
                        Ok(value) => {
                            let conversation_id = req
                                .conversation_id
                                .clone()
                                .unwrap_or_else(|| new_conversation_id(&request));
                            let mut history = prior;
                            history.extend(fresh);
                            history.push(Turn::assistant(raw.content));
                            self.conversations
                                .lock()
                                .unwrap()
                                .insert(conversation_id.clone(), history);
                            return Ok(StructuredReply {
                                value,
                                usage,
                                conversation_id,
                                attempts: attempt,
                            });
                        }
                        Err(message) => {
                            tracing::debug!(attempt, %message, schema = %req.response_schema.name, "reply failed validation");
                            exchange.push(Turn::assistant(raw.content));
                            exchange.push(Turn::user(repair_prompt(&message)));
                            last_error = ProviderError::Schema(message);
                        }
                    }
                }
                Err(err) => {
                    usage.absorb(&UsageStats::one_request(0, 0, latency));
                    if matches!(err, ProviderError::Auth(_) | ProviderError::InvalidInput(_)) {
                        return Err(ChatFailure {
                            error: err,
                            usage,
                            attempts: attempt,
                        });
                    }
                    tracing::debug!(attempt, error = %err, "chat attempt failed");
                    last_error = err;
                    if attempt < max {
                        let delay = self.config.backoff.delay(attempt);
                        if !delay.is_zero() {
                            tokio::time::sleep(delay).await;
                        }
                    }
                }
            }
        }
        Err(ChatFailure {
            error: last_error,
            usage,
            attempts: max,
        })
    }

    /// Drops the stored history of a finished conversation.
    pub fn end_conversation(&self, id: &str) {
        self.conversations.lock().unwrap().remove(id);
    }

    pub fn open_conversations(&self) -> usize {
        self.conversations.lock().unwrap().len()
    }

    fn prepare_turns(&self, turns: &[Turn]) -> Result<Vec<Turn>, ProviderError> {
        turns
            .iter()
            .map(|t| {
                let images = t
                    .images
                    .iter()
                    .map(|img| imaging::cap_attachment(img, self.config.image_cap))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Turn {
                    role: t.role,
                    text: t.text.clone(),
                    images,
                })
            })
            .collect()
    }
}

fn parse_and_check<F>(content: &str, schema: &ResponseSchema, check: &F) -> Result<Value, String>
where
    F: Fn(&Value) -> Result<(), String>,
{
    let value: Value =
        serde_json::from_str(strip_fences(content)).map_err(|e| format!("reply is not valid JSON: {e}"))?;
    schema.schema.validate(&value).map_err(|v| v.to_string())?;
    check(&value)?;
    Ok(value)
}

/// Tolerates replies wrapped in a Markdown code fence.
fn strip_fences(content: &str) -> &str {
    let t = content.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        if let Some(inner) = rest.trim_end().strip_suffix("```") {
            return inner.trim();
        }
    }
    t
}

fn repair_prompt(message: &str) -> String {
    format!(
        "Your previous reply did not satisfy the required JSON format: {message}\n\
         Reply again with only the corrected JSON."
    )
}

fn new_conversation_id(first: &BackendRequest) -> String {
    format!("conv-{}", &request_digest(first)[..16])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::schema::Schema;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Replies from a fixed list, one per call; past the end repeats the last.
    struct Sequence {
        replies: Vec<Result<String, ProviderError>>,
        calls: AtomicUsize,
        seen: Mutex<Vec<BackendRequest>>,
    }

    impl Sequence {
        fn new(replies: Vec<Result<&str, ProviderError>>) -> Arc<Self> {
            Arc::new(Self {
                replies: replies.into_iter().map(|r| r.map(str::to_string)).collect(),
                calls: AtomicUsize::new(0),
                seen: Mutex::new(Vec::new()),
            })
        }
    }

    #[async_trait]
    impl ChatBackend for Sequence {
        async fn send(&self, request: &BackendRequest) -> Result<RawReply, ProviderError> {
            self.seen.lock().unwrap().push(request.clone());
            let i = self.calls.fetch_add(1, Ordering::SeqCst).min(self.replies.len() - 1);
            self.replies[i].clone().map(|content| RawReply {
                content,
                prompt_tokens: 10,
                completion_tokens: 2,
            })
        }
    }

    fn schema() -> ResponseSchema {
        ResponseSchema::new("answer", Schema::object([Schema::text().req("answer")]))
    }

    fn client(backend: Arc<Sequence>) -> ChatClient {
        ChatClient::new(backend, ProviderConfig::scripted())
    }

    #[tokio::test]
    async fn first_valid_reply_wins() {
        let b = Sequence::new(vec![Ok(r#"{"answer":"yes"}"#)]);
        let r = client(b)
            .chat_structured(ChatRequest::new("sys", schema()).turn(Turn::user("q")))
            .await
            .unwrap();
        assert_eq!(r.value["answer"], "yes");
        assert_eq!(r.usage.requests, 1);
        assert_eq!(r.usage.prompt_tokens, 10);
        assert_eq!(r.attempts, 1);
    }

    #[tokio::test]
    async fn two_schema_failures_then_success_costs_three_requests() {
        let b = Sequence::new(vec![
            Ok(r#"{"wrong":1}"#),
            Ok("not json"),
            Ok(r#"{"answer":"ok"}"#),
        ]);
        let c = client(b.clone());
        let r = c
            .chat_structured(ChatRequest::new("sys", schema()).turn(Turn::user("q")))
            .await
            .unwrap();
        assert_eq!(r.usage.requests, 3);
        assert_eq!(r.attempts, 3);
        // The validator message is fed back into the conversation.
        let seen = b.seen.lock().unwrap();
        assert_eq!(seen[1].messages.len(), 3);
        assert!(seen[1].messages[2].text.contains("$.answer"));
        assert!(seen[2].messages[4].text.contains("not valid JSON"));
    }

    #[tokio::test]
    async fn exhausted_schema_attempts_report_last_message() {
        let b = Sequence::new(vec![Ok(r#"{"answer":""}"#)]);
        let f = client(b)
            .chat_structured(ChatRequest::new("sys", schema()).turn(Turn::user("q")))
            .await
            .unwrap_err();
        assert_eq!(f.attempts, 3);
        assert_eq!(f.usage.requests, 3);
        match f.error {
            ProviderError::Schema(msg) => assert!(msg.contains("must not be empty")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn transport_errors_retry_then_fail() {
        let b = Sequence::new(vec![Err(ProviderError::Transport("down".into()))]);
        let f = client(b)
            .chat_structured(ChatRequest::new("sys", schema()).turn(Turn::user("q")))
            .await
            .unwrap_err();
        assert_eq!(f.error.kind(), "transport");
        assert_eq!(f.usage.requests, 3);
        assert_eq!(f.usage.total_tokens(), 0);
    }

    #[tokio::test]
    async fn auth_errors_do_not_retry() {
        let b = Sequence::new(vec![Err(ProviderError::Auth("bad key".into()))]);
        let f = client(b)
            .chat_structured(ChatRequest::new("sys", schema()).turn(Turn::user("q")))
            .await
            .unwrap_err();
        assert_eq!(f.attempts, 1);
        assert_eq!(f.usage.requests, 1);
    }

    #[tokio::test]
    async fn semantic_check_feeds_repair_loop() {
        let b = Sequence::new(vec![Ok(r#"{"answer":"no"}"#), Ok(r#"{"answer":"yes"}"#)]);
        let r = client(b)
            .chat_structured_checked(
                ChatRequest::new("sys", schema()).turn(Turn::user("q")),
                |v| {
                    if v["answer"] == "yes" {
                        Ok(())
                    } else {
                        Err("answer must be yes".into())
                    }
                },
            )
            .await
            .unwrap();
        assert_eq!(r.attempts, 2);
    }

    #[tokio::test]
    async fn conversation_continuation_prepends_history() {
        let b = Sequence::new(vec![Ok(r#"{"answer":"one"}"#), Ok(r#"{"answer":"two"}"#)]);
        let c = client(b.clone());
        let first = c
            .chat_structured(ChatRequest::new("sys", schema()).turn(Turn::user("q1")))
            .await
            .unwrap();
        c.chat_structured(
            ChatRequest::new("sys", schema())
                .turn(Turn::user("q2"))
                .continuing(first.conversation_id.clone()),
        )
        .await
        .unwrap();
        {
            let seen = b.seen.lock().unwrap();
            let texts: Vec<&str> = seen[1].messages.iter().map(|t| t.text.as_str()).collect();
            assert_eq!(texts, vec!["q1", r#"{"answer":"one"}"#, "q2"]);
        }
        assert_eq!(c.open_conversations(), 1);
        c.end_conversation(&first.conversation_id);
        assert_eq!(c.open_conversations(), 0);

        let err = c
            .chat_structured(ChatRequest::new("sys", schema()).continuing("nope"))
            .await
            .unwrap_err();
        assert_eq!(err.error.kind(), "invalid_input");
    }

    #[test]
    fn fences_are_stripped() {
        assert_eq!(strip_fences("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(strip_fences(" {\"a\":1} "), "{\"a\":1}");
    }
}
