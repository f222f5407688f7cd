use std::collections::HashMap;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ProviderError;

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Scales `values` to unit length. Zero vectors become the first basis vector.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            values.iter_mut().for_each(|v| *v /= norm);
        } else if !values.is_empty() {
            values.iter_mut().for_each(|v| *v = 0.0);
            values[0] = 1.0;
        }
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[async_trait]
pub trait EmbeddingBackend: Send + Sync {
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

/// Embeds `texts`, one unit vector per input in input order.
pub async fn embed_texts(
    backend: &dyn EmbeddingBackend,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ProviderError::InvalidInput(format!("text {i} is empty")));
    }
    let vectors = backend.embed(texts).await?;
    if vectors.len() != texts.len() {
        return Err(ProviderError::Transport(format!(
            "embedding service returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    Ok(vectors)
}

/// Deterministic offline embedder: each lowercase alphanumeric token maps to a
/// pseudo-random direction drawn from a seeded SHA-256 stream, and a text's
/// vector is the normalized sum of its token directions. Texts that share
/// most tokens land close together.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(128, 0)
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn token_direction(&self, token: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while out.len() < self.dim {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(block.to_le_bytes());
            h.update(token.as_bytes());
            let bytes = h.finalize();
            for pair in bytes.chunks_exact(2) {
                if out.len() == self.dim {
                    break;
                }
                let v = u16::from_le_bytes([pair[0], pair[1]]) as f64;
                out.push(v / 32767.5 - 1.0);
            }
            block += 1;
        }
        out
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut acc = vec![0.0; self.dim];
        if tokens.is_empty() {
            acc = self.token_direction(&lower);
        }
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_direction(t)) {
                *a += v;
            }
        }
        EmbeddingVector::normalized(acc)
    }
}

#[async_trait]
impl EmbeddingBackend for HashEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Looks texts up in a fixed table; unknown texts are an error.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder {
    table: HashMap<String, EmbeddingVector>,
}

impl FixedEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, text: impl Into<String>, values: Vec<f64>) -> Self {
        self.table
            .insert(text.into(), EmbeddingVector::normalized(values));
        self
    }
}

#[async_trait]
impl EmbeddingBackend for FixedEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| ProviderError::InvalidInput(format!("no fixed embedding for {t:?}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    }

    #[tokio::test]
    async fn identical_texts_identical_vectors() {
        let e = HashEmbedder::default();
        let v = embed_texts(&e, &["x".to_string(), "x".to_string()]).await.unwrap();
        assert_eq!(v[0], v[1]);
        assert!((cos(&v[0], &v[1]) - 1.0).abs() < 1e-12);
    }

    #[tokio::test]
    async fn unit_norm_and_empty_cases() {
        let e = HashEmbedder::default();
        let v = embed_texts(&e, &["Slippery Floors - wet tiles".to_string(), "!!".to_string()])
            .await
            .unwrap();
        for x in &v {
            assert!((x.norm() - 1.0).abs() < 1e-6);
        }
        assert!(embed_texts(&e, &[]).await.unwrap().is_empty());
        assert!(matches!(
            embed_texts(&e, &["ok".into(), "  ".into()]).await,
            Err(ProviderError::InvalidInput(_))
        ));
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        let e = HashEmbedder::default();
        let a = e.embed_one("high bar counter too high for wheelchair");
        let b = e.embed_one("High bar counter, too high for a wheelchair");
        let c = e.embed_one("slippery floor near bathtub");
        assert!(cos(&a, &b) > 0.7);
        assert!(cos(&a, &c) < 0.5);
    }

    #[test]
    fn seed_changes_vectors() {
        let a = HashEmbedder::new(16, 1).embed_one("x");
        let b = HashEmbedder::new(16, 2).embed_one("x");
        assert_ne!(a, b);
        assert_eq!(a.dim(), 16);
    }
}
