//! HTTP backends for live services: an OpenAI-compatible chat and embeddings
//! API, and a segmentation endpoint that accepts raw image bytes and answers
//! `{"labels": [SegmentLabel]}`.

use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde_json::{json, Value};

use super::chat::{BackendRequest, ChatBackend, RawReply, Role};
use super::embed::{EmbeddingBackend, EmbeddingVector};
use super::segment::Segmenter;
use super::{ProviderConfig, ProviderError};
use crate::domain::SegmentLabel;

pub const CHAT_KEY_ENV: &str = "SCOUT_CHAT_API_KEY";
pub const EMBED_KEY_ENV: &str = "SCOUT_EMBED_API_KEY";
pub const SEG_ENDPOINT_ENV: &str = "SCOUT_SEG_ENDPOINT";

fn http_client(config: &ProviderConfig) -> Result<reqwest::Client, ProviderError> {
    reqwest::Client::builder()
        .timeout(Duration::from_secs_f64(config.timeout_seconds.max(1.0)))
        .build()
        .map_err(|e| ProviderError::Transport(e.to_string()))
}

fn credential(config: &ProviderConfig, default_env: &str) -> Result<String, ProviderError> {
    let var = config.credential_env.as_deref().unwrap_or(default_env);
    std::env::var(var)
        .ok()
        .filter(|v| !v.trim().is_empty())
        .ok_or_else(|| ProviderError::Auth(format!("{var} is not set")))
}

async fn post_json(
    client: &reqwest::Client,
    url: &str,
    key: Option<&str>,
    body: &Value,
) -> Result<Value, ProviderError> {
    let mut req = client.post(url).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    let resp = req
        .send()
        .await
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    read_json(resp).await
}

async fn read_json(resp: reqwest::Response) -> Result<Value, ProviderError> {
    let status = resp.status();
    let text = resp
        .text()
        .await
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
        return Err(ProviderError::Auth(format!("{status}: {text}")));
    }
    if !status.is_success() {
        return Err(ProviderError::Transport(format!("{status}: {text}")));
    }
    serde_json::from_str(&text).map_err(|e| ProviderError::Transport(format!("bad response body: {e}")))
}

pub struct LiveChat {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    key: String,
}

impl LiveChat {
    pub fn from_env(config: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            client: http_client(config)?,
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
            model: config.model.clone(),
            key: credential(config, CHAT_KEY_ENV)?,
        })
    }
}

/// Builds an OpenAI-style chat completion body with a JSON-schema response format.
pub fn chat_body(model: &str, req: &BackendRequest) -> Value {
    let mut messages = vec![json!({"role": "system", "content": req.system})];
    for turn in &req.messages {
        let role = match turn.role {
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        if turn.images.is_empty() {
            messages.push(json!({"role": role, "content": turn.text}));
            continue;
        }
        let mut parts = vec![json!({"type": "text", "text": turn.text})];
        for img in &turn.images {
            let b64 = base64::engine::general_purpose::STANDARD.encode(img.data.as_slice());
            parts.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{};base64,{b64}", img.media_type)},
            }));
        }
        messages.push(json!({"role": role, "content": parts}));
    }
    json!({
        "model": model,
        "messages": messages,
        "temperature": 0,
        "response_format": {
            "type": "json_schema",
            "json_schema": {"name": req.schema.name, "schema": req.schema.schema.to_json_schema(), "strict": false},
        },
    })
}

#[async_trait]
impl ChatBackend for LiveChat {
    async fn send(&self, req: &BackendRequest) -> Result<RawReply, ProviderError> {
        let url = format!("{}/chat/completions", self.endpoint);
        let v = post_json(&self.client, &url, Some(&self.key), &chat_body(&self.model, req)).await?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Transport("response has no message content".into()))?
            .to_string();
        Ok(RawReply {
            content,
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        })
    }
}

pub struct LiveEmbedder {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    key: String,
}

impl LiveEmbedder {
    pub fn from_env(config: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            client: http_client(config)?,
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
            model: config.model.clone(),
            key: credential(config, EMBED_KEY_ENV)?,
        })
    }
}

#[async_trait]
impl EmbeddingBackend for LiveEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let url = format!("{}/embeddings", self.endpoint);
        let v = post_json(
            &self.client,
            &url,
            Some(&self.key),
            &json!({"model": self.model, "input": texts}),
        )
        .await?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| ProviderError::Transport("response has no data".into()))?;
        let mut rows: Vec<(u64, EmbeddingVector)> = Vec::with_capacity(data.len());
        for (i, d) in data.iter().enumerate() {
            let values: Vec<f64> = d["embedding"]
                .as_array()
                .ok_or_else(|| ProviderError::Transport("embedding row has no vector".into()))?
                .iter()
                .map(|x| x.as_f64().unwrap_or(0.0))
                .collect();
            rows.push((d["index"].as_u64().unwrap_or(i as u64), EmbeddingVector::normalized(values)));
        }
        rows.sort_by_key(|r| r.0);
        Ok(rows.into_iter().map(|r| r.1).collect())
    }
}

pub struct HttpSegmenter {
    client: reqwest::Client,
    endpoint: String,
}

impl HttpSegmenter {
    pub fn new(endpoint: impl Into<String>, config: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            client: http_client(config)?,
            endpoint: endpoint.into(),
        })
    }

    pub fn from_env(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let endpoint = std::env::var(SEG_ENDPOINT_ENV)
            .map_err(|_| ProviderError::Auth(format!("{SEG_ENDPOINT_ENV} is not set")))?;
        Self::new(endpoint, config)
    }
}

#[async_trait]
impl Segmenter for HttpSegmenter {
    async fn segment(&self, image: &[u8]) -> Result<Vec<SegmentLabel>, ProviderError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/octet-stream")
            .body(image.to_vec())
            .send()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let v = read_json(resp).await?;
        serde_json::from_value(v["labels"].clone())
            .map_err(|e| ProviderError::Transport(format!("bad segmentation response: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::schema::{ResponseSchema, Schema};
    use crate::providers::{ImageAttachment, Turn};

    #[test]
    fn body_carries_images_as_data_urls() {
        let req = BackendRequest {
            system: "s".into(),
            messages: vec![
                Turn::user("look").with_image(ImageAttachment::new("image/png", vec![1, 2, 3])),
                Turn::assistant("{}"),
            ],
            schema: ResponseSchema::new("x", Schema::object([Schema::text().req("a")])),
        };
        let body = chat_body("m", &req);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
        assert_eq!(body["messages"][2]["content"], "{}");
        assert_eq!(body["response_format"]["json_schema"]["name"], "x");
    }

    #[test]
    fn missing_credential_is_auth_error() {
        let cfg = ProviderConfig {
            credential_env: Some("SCOUT_TEST_SURELY_UNSET_VAR".into()),
            ..ProviderConfig::default()
        };
        assert!(matches!(LiveChat::from_env(&cfg), Err(ProviderError::Auth(_))));
    }
}
