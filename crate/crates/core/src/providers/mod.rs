//! Clients for the three external model services: multimodal chat, text
//! embedding and image segmentation, plus deterministic scripted substitutes.
//!
//! Backends are stateless handles. Each client enforces a concurrent-request
//! ceiling through its own admission limiter.

mod chat;
mod embed;
mod imaging;
pub mod live;
pub mod marks;
pub mod schema;
mod scripted;
mod segment;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chat::{
    request_digest, BackendRequest, ChatBackend, ChatClient, ChatFailure, ChatRequest,
    ImageAttachment, RawReply, Role, StructuredReply, Turn,
};
pub use embed::{embed_texts, EmbeddingBackend, EmbeddingVector, FixedEmbedder, HashEmbedder};
pub use imaging::{decode_rgb, downscale_to_cap, encode_png};
pub use marks::{render_marks, render_marks_png};
pub use schema::{ResponseSchema, Schema, SchemaViolation};
pub use scripted::{ScriptRule, ScriptedChat, ScriptedError, ScriptFile};
pub use segment::{segment_image, ColorSegmenter, FixtureSegmenter, Segmenter};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("reply never matched schema: {0}")]
    Schema(String),
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error("invalid request: {0}")]
    InvalidInput(String),
}

impl ProviderError {
    /// Short machine-readable kind, used in scan failure entries.
    pub fn kind(&self) -> &'static str {
        match self {
            ProviderError::Transport(_) => "transport",
            ProviderError::Auth(_) => "auth",
            ProviderError::Schema(_) => "schema",
            ProviderError::UnsupportedImage(_) => "unsupported_image",
            ProviderError::InvalidInput(_) => "invalid_input",
        }
    }
}

/// USD per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct PriceTable {
    pub prompt_usd_per_mtok: f64,
    pub completion_usd_per_mtok: f64,
}

impl PriceTable {
    /// gpt-4o-2024-08-06 Batch API rates as of March 2025.
    pub const GPT4O_2024_08_06_BATCH: PriceTable = PriceTable {
        prompt_usd_per_mtok: 1.25,
        completion_usd_per_mtok: 5.00,
    };

    /// gpt-4o-2024-08-06 standard rates as of March 2025.
    pub const GPT4O_2024_08_06: PriceTable = PriceTable {
        prompt_usd_per_mtok: 2.50,
        completion_usd_per_mtok: 10.00,
    };

    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        (prompt_tokens as f64 * self.prompt_usd_per_mtok
            + completion_tokens as f64 * self.completion_usd_per_mtok)
            / 1e6
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.prompt_usd_per_mtok < 0.0 || self.completion_usd_per_mtok < 0.0 {
            return Err("prices must be non-negative".into());
        }
        Ok(())
    }
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable::GPT4O_2024_08_06_BATCH
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Backoff {
    pub initial_seconds: f64,
    pub multiplier: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial_seconds: 1.0,
            multiplier: 2.0,
        }
    }
}

impl Backoff {
    pub const NONE: Backoff = Backoff {
        initial_seconds: 0.0,
        multiplier: 1.0,
    };

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let secs = self.initial_seconds * self.multiplier.powi(retry.saturating_sub(1) as i32);
        Duration::from_secs_f64(secs.max(0.0))
    }
}

/// Settings shared by every provider client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the credential.
    pub credential_env: Option<String>,
    pub model: String,
    pub max_attempts: u32,
    pub backoff: Backoff,
    pub timeout_seconds: f64,
    pub prices: PriceTable,
    pub max_concurrent: usize,
    /// Longest image side sent to the chat model, in pixels.
    pub image_cap: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            credential_env: None,
            model: "gpt-4o-2024-08-06".into(),
            max_attempts: 3,
            backoff: Backoff::default(),
            timeout_seconds: 60.0,
            prices: PriceTable::default(),
            max_concurrent: 8,
            image_cap: 1536,
        }
    }
}

impl ProviderConfig {
    /// Zero backoff, for scripted substitutes.
    pub fn scripted() -> Self {
        Self {
            backoff: Backoff::NONE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts < 1 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.max_concurrent < 1 {
            return Err("max_concurrent must be at least 1".into());
        }
        self.prices.validate()
    }
}
