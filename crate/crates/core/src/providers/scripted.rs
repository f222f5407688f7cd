//! Scripted chat substitute.
//!
//! Replies come from, in order: a directory of canned replies named
//! `{request_digest}.json`, then an ordered rule list matched on response
//! schema name and substrings of the user turns. A request matching neither
//! is a transport error. Matching is stateless, so identical requests always
//! yield identical bytes.

use std::path::{Path, PathBuf};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::chat::{request_digest, BackendRequest, ChatBackend, RawReply, Role};
use super::ProviderError;

const IMAGE_TOKENS: u64 = 85;

#[derive(Debug, Error)]
pub enum ScriptedError {
    #[error("cannot read script {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid script {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    /// Response schema name; absent matches any.
    #[serde(default)]
    pub schema: Option<String>,
    /// Every substring must occur in the request's user turns.
    #[serde(default)]
    pub contains: Vec<String>,
    /// Structured reply, sent as compact JSON.
    #[serde(default)]
    pub reply: Option<Value>,
    /// Reply text sent verbatim, for malformed-reply scripts.
    #[serde(default)]
    pub raw: Option<String>,
    /// Error kind: `transport`, `auth` or `invalid_input`.
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub usage: Option<ScriptUsage>,
}

impl ScriptRule {
    fn validate(&self) -> Result<(), String> {
        let actions = [self.reply.is_some(), self.raw.is_some(), self.error.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if actions != 1 {
            return Err("each rule needs exactly one of reply, raw, error".into());
        }
        if let Some(e) = &self.error {
            if !matches!(e.as_str(), "transport" | "auth" | "invalid_input") {
                return Err(format!("unknown error kind {e:?}"));
            }
        }
        Ok(())
    }

    fn matches(&self, schema: &str, user_text: &str) -> bool {
        self.schema.as_deref().is_none_or(|s| s == schema)
            && self.contains.iter().all(|c| user_text.contains(c.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    pub rules: Vec<ScriptRule>,
}

impl ScriptFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let file: ScriptFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for (i, r) in file.rules.iter().enumerate() {
            r.validate().map_err(|m| format!("rules[{i}]: {m}"))?;
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptedError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptedError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|message| ScriptedError::Invalid {
            path: path.display().to_string(),
            message,
        })
    }

    /// Rules of `self` first, then those of `other`.
    pub fn then(mut self, other: ScriptFile) -> Self {
        self.rules.extend(other.rules);
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedChat {
    digest_dir: Option<PathBuf>,
    rules: Vec<ScriptRule>,
}

impl ScriptedChat {
    pub fn from_rules(script: ScriptFile) -> Self {
        Self {
            digest_dir: None,
            rules: script.rules,
        }
    }

    pub fn from_digest_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            digest_dir: Some(dir.into()),
            rules: Vec::new(),
        }
    }

    pub fn with_digest_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.digest_dir = Some(dir.into());
        self
    }

    fn lookup_digest(&self, req: &BackendRequest) -> Result<Option<Value>, ProviderError> {
        let Some(dir) = &self.digest_dir else {
            return Ok(None);
        };
        let path = dir.join(format!("{}.json", request_digest(req)));
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| ProviderError::Transport(format!("bad canned reply {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ProviderError::Transport(e.to_string())),
        }
    }
}

fn estimate_prompt_tokens(req: &BackendRequest) -> u64 {
    let mut chars = req.system.chars().count() as u64;
    let mut images = 0u64;
    for m in &req.messages {
        chars += m.text.chars().count() as u64;
        images += m.images.len() as u64;
    }
    chars.div_ceil(4) + images * IMAGE_TOKENS
}

fn user_text(req: &BackendRequest) -> String {
    req.messages
        .iter()
        .filter(|t| t.role == Role::User)
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

#[async_trait]
impl ChatBackend for ScriptedChat {
    async fn send(&self, req: &BackendRequest) -> Result<RawReply, ProviderError> {
        let prompt_estimate = estimate_prompt_tokens(req);
        if let Some(value) = self.lookup_digest(req)? {
            let content = value.to_string();
            return Ok(RawReply {
                completion_tokens: (content.chars().count() as u64).div_ceil(4),
                content,
                prompt_tokens: prompt_estimate,
            });
        }
        let text = user_text(req);
        let Some(rule) = self.rules.iter().find(|r| r.matches(&req.schema.name, &text)) else {
            return Err(ProviderError::Transport(format!(
                "no scripted reply for {} request {}",
                req.schema.name,
                &request_digest(req)[..12]
            )));
        };
        if let Some(kind) = &rule.error {
            let msg = format!("scripted {kind} failure");
            return Err(match kind.as_str() {
                "auth" => ProviderError::Auth(msg),
                "invalid_input" => ProviderError::InvalidInput(msg),
                _ => ProviderError::Transport(msg),
            });
        }
        let content = match (&rule.reply, &rule.raw) {
            (Some(v), _) => v.to_string(),
            (None, Some(raw)) => raw.clone(),
            (None, None) => unreachable!("validated rule has an action"),
        };
        let (prompt_tokens, completion_tokens) = match rule.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (prompt_estimate, (content.chars().count() as u64).div_ceil(4)),
        };
        Ok(RawReply {
            content,
            prompt_tokens,
            completion_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::schema::{ResponseSchema, Schema};
    use crate::providers::Turn;
    use serde_json::json;

    fn req(schema: &str, text: &str) -> BackendRequest {
        BackendRequest {
            system: "sys".into(),
            messages: vec![Turn::user(text)],
            schema: ResponseSchema::new(schema, Schema::Any),
        }
    }

    fn script() -> ScriptFile {
        ScriptFile::parse(
            &json!({"rules": [
                {"schema": "tasks", "contains": ["bathroom"], "reply": {"tasks": []}, "usage": {"prompt_tokens": 7, "completion_tokens": 3}},
                {"schema": "tasks", "error": "transport"},
                {"contains": ["garbled"], "raw": "not json"},
            ]})
            .to_string(),
        )
        .unwrap()
    }

    #[tokio::test]
    async fn first_matching_rule_wins() {
        let chat = ScriptedChat::from_rules(script());
        let r = chat.send(&req("tasks", "a bathroom")).await.unwrap();
        assert_eq!(r.content, r#"{"tasks":[]}"#);
        assert_eq!((r.prompt_tokens, r.completion_tokens), (7, 3));
        let e = chat.send(&req("tasks", "a kitchen")).await.unwrap_err();
        assert_eq!(e.kind(), "transport");
        let raw = chat.send(&req("other", "garbled please")).await.unwrap();
        assert_eq!(raw.content, "not json");
        assert!(chat.send(&req("other", "nothing")).await.is_err());
    }

    #[tokio::test]
    async fn replies_are_bit_deterministic() {
        let chat = ScriptedChat::from_rules(script());
        let a = chat.send(&req("other", "garbled")).await.unwrap();
        let b = chat.send(&req("other", "garbled")).await.unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prompt_tokens, 3);
    }

    #[tokio::test]
    async fn digest_directory_takes_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let r = req("tasks", "a bathroom");
        std::fs::write(
            dir.path().join(format!("{}.json", request_digest(&r))),
            r#"{"tasks": [{"name": "F1"}]}"#,
        )
        .unwrap();
        let chat = ScriptedChat::from_rules(script()).with_digest_dir(dir.path());
        let reply = chat.send(&r).await.unwrap();
        assert_eq!(reply.content, r#"{"tasks":[{"name":"F1"}]}"#);
    }

    #[test]
    fn rules_need_one_action() {
        assert!(ScriptFile::parse(r#"{"rules":[{"schema":"x"}]}"#).is_err());
        assert!(ScriptFile::parse(r#"{"rules":[{"error":"boom"}]}"#).is_err());
        assert!(ScriptFile::parse(r#"{"rules":[{"raw":"a","reply":1}]}"#).is_err());
    }
}
