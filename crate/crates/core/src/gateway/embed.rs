use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    with_retries, CallRole, GatewayEnv, GatewayError, ModelConfig, ProviderError, UsageCounters,
};

/// Unit-norm embedding. Serialized as a plain decimal array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Scales `raw` to unit Euclidean norm.
    pub fn normalized(raw: Vec<f64>) -> Option<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return None;
        }
        Some(Self {
            values: raw.into_iter().map(|x| x / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// Inner product of two unit vectors, clamped to [-1, 1].
///
/// Every similarity in the crate goes through this function.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, GatewayError> {
    if a.dimension() != b.dimension() {
        return Err(GatewayError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbeddings {
    pub vectors: Vec<Vec<f64>>,
    pub prompt_tokens: Option<u64>,
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, config: &ModelConfig, texts: &[String])
        -> Result<RawEmbeddings, ProviderError>;
}

/// Deterministic bag-of-tokens embedder: each lowercase alphanumeric token
/// is hashed (seeded SHA-256) to a signed unit bump in one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub seed: u64,
    pub dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            seed: 0,
            dimension: super::HASH_EMBEDDING_DIM,
        }
    }
}

impl HashEmbedder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn raw_vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(lowered.as_str());
        }
        for token in tokens {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(token.as_bytes());
            let digest = hasher.finalize();
            let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize
                % self.dimension;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, _: &ModelConfig, texts: &[String]) -> Result<RawEmbeddings, ProviderError> {
        Ok(RawEmbeddings {
            vectors: texts.iter().map(|t| self.raw_vector(t)).collect(),
            prompt_tokens: None,
        })
    }
}

#[derive(Clone)]
pub struct EmbeddingGateway {
    provider: Arc<dyn EmbeddingProvider>,
    config: ModelConfig,
    env: GatewayEnv,
    dimension: Arc<OnceLock<usize>>,
}

impl EmbeddingGateway {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, config: ModelConfig, env: GatewayEnv) -> Self {
        Self {
            provider,
            config,
            env,
            dimension: Arc::new(OnceLock::new()),
        }
    }

    /// Offline gateway over [`HashEmbedder`].
    pub fn hashing(seed: u64, env: GatewayEnv) -> Self {
        Self::new(
            Arc::new(HashEmbedder::new(seed)),
            ModelConfig::named("hash-embedder"),
            env,
        )
    }

    /// Embeds `texts` in order; every vector is unit-normalized.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::EmptyText { index });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let start = self.env.clock.now_ms();
        let (raw, attempts) = with_retries(&self.config, self.env.sleeper.as_ref(), |_| {
            self.provider.embed(&self.config, texts)
        })?;
        if raw.vectors.len() != texts.len() {
            return Err(GatewayError::CountMismatch {
                expected: texts.len(),
                got: raw.vectors.len(),
            });
        }
        let mut out = Vec::with_capacity(texts.len());
        for (index, values) in raw.vectors.into_iter().enumerate() {
            let expected = *self.dimension.get_or_init(|| values.len());
            if values.len() != expected {
                return Err(GatewayError::DimensionMismatch {
                    left: expected,
                    right: values.len(),
                });
            }
            out.push(
                EmbeddingVector::normalized(values).ok_or(GatewayError::ZeroVector { index })?,
            );
        }
        let usage = UsageCounters {
            prompt_tokens: raw
                .prompt_tokens
                .unwrap_or_else(|| texts.iter().map(|t| crate::util::estimate_tokens(t)).sum()),
            completion_tokens: 0,
            wall_time: Duration::from_millis(self.env.clock.now_ms().saturating_sub(start)),
        };
        self.env.ledger.record(CallRole::Embedder, usage, attempts);
        Ok(out)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}
