use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingSet};

/// Token vectors for one text, plus an optional special-token mask.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenVectors {
    pub vectors: Vec<Vec<f32>>,
    pub special: Vec<bool>,
}

/// Source of token-level embeddings. Items are `(review_id, text)` pairs and
/// the result has one entry per item, in order.
pub trait TokenProvider: Send + Sync {
    fn provider_id(&self) -> String;

    fn dimension(&self) -> usize;

    fn embed_tokens(&self, items: &[(&str, &str)]) -> Result<Vec<TokenVectors>, EmbeddingError>;

    /// Whether pooled vectors may be cached by `(provider_id, text)`.
    fn cacheable(&self) -> bool {
        true
    }

    fn max_batch(&self) -> usize {
        16
    }
}

/// Deterministic stand-in encoder: whitespace tokens, each word hashed to a
/// fixed vector with components in [-1, 1).
#[derive(Debug, Clone)]
pub struct HashingProvider {
    dimension: usize,
    seed: u64,
}

impl HashingProvider {
    pub const DEFAULT_DIMENSION: usize = 32;

    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension, seed }
    }

    pub fn word_vector(&self, word: &str) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dimension);
        let mut block = 0u64;
        while out.len() < self.dimension {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(block.to_le_bytes());
            hasher.update(word.as_bytes());
            let digest = hasher.finalize();
            for chunk in digest.chunks_exact(4) {
                if out.len() == self.dimension {
                    break;
                }
                let bits = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                // 24 bits keep the value exactly representable in f32.
                let unit = (bits >> 8) as f32 / (1u32 << 24) as f32;
                out.push(unit * 2.0 - 1.0);
            }
            block += 1;
        }
        out
    }

    pub fn embed_text(&self, text: &str) -> TokenVectors {
        let mut vectors: Vec<Vec<f32>> = text.split_whitespace().map(|w| self.word_vector(w)).collect();
        if vectors.is_empty() {
            vectors.push(vec![0.0; self.dimension]);
        }
        TokenVectors {
            vectors,
            special: Vec::new(),
        }
    }
}

impl Default for HashingProvider {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMENSION, 0)
    }
}

impl TokenProvider for HashingProvider {
    fn provider_id(&self) -> String {
        format!("hashing-d{}-s{}", self.dimension, self.seed)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_tokens(&self, items: &[(&str, &str)]) -> Result<Vec<TokenVectors>, EmbeddingError> {
        Ok(items.iter().map(|(_, text)| self.embed_text(text)).collect())
    }
}

#[derive(Serialize)]
struct EncoderRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EncoderResponse {
    token_vectors: Vec<Vec<Vec<f32>>>,
    #[serde(default)]
    special_tokens_mask: Option<Vec<Vec<bool>>>,
}

/// HTTP encoder endpoint: `POST {texts: [..]}` answered by
/// `{token_vectors: [[[..]]], special_tokens_mask?: [[..]]}`.
pub struct RemoteEncoder {
    endpoint: String,
    model_id: String,
    dimension: usize,
    auth_token: Option<String>,
    batch_size: usize,
    agent: ureq::Agent,
}

impl RemoteEncoder {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, dimension: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            dimension,
            auth_token: None,
            batch_size: 16,
            agent,
        }
    }

    pub fn with_auth_token(mut self, token: Option<String>) -> Self {
        self.auth_token = token;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }
}

impl TokenProvider for RemoteEncoder {
    fn provider_id(&self) -> String {
        format!("remote:{}", self.model_id)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_batch(&self) -> usize {
        self.batch_size
    }

    fn embed_tokens(&self, items: &[(&str, &str)]) -> Result<Vec<TokenVectors>, EmbeddingError> {
        let body = EncoderRequest {
            texts: items.iter().map(|(_, t)| *t).collect(),
        };
        let mut request = self.agent.post(&self.endpoint);
        if let Some(token) = &self.auth_token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(EmbeddingError::Provider(format!("encoder returned {status}: {text}")));
        }
        let parsed: EncoderResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Provider(format!("bad encoder response: {e}")))?;
        let masks = parsed.special_tokens_mask.unwrap_or_default();
        Ok(parsed
            .token_vectors
            .into_iter()
            .enumerate()
            .map(|(i, vectors)| TokenVectors {
                vectors,
                special: masks.get(i).cloned().unwrap_or_default(),
            })
            .collect())
    }
}

/// Serves precomputed document vectors by review id. Each vector is returned
/// as a single token, so pooling leaves it unchanged.
pub struct PrecomputedProvider {
    id: String,
    dimension: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedProvider {
    pub fn new(set: EmbeddingSet) -> Self {
        Self {
            id: format!("file:{}", &set.digest()[..16]),
            dimension: set.dimension,
            vectors: set.vectors,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Ok(Self::new(super::read_embeddings(path)?))
    }
}

impl TokenProvider for PrecomputedProvider {
    fn provider_id(&self) -> String {
        self.id.clone()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn cacheable(&self) -> bool {
        false
    }

    fn max_batch(&self) -> usize {
        1024
    }

    fn embed_tokens(&self, items: &[(&str, &str)]) -> Result<Vec<TokenVectors>, EmbeddingError> {
        items
            .iter()
            .map(|(id, _)| {
                let v = self
                    .vectors
                    .get(*id)
                    .ok_or_else(|| EmbeddingError::Provider(format!("no precomputed vector for {id}")))?;
                Ok(TokenVectors {
                    vectors: vec![v.iter().map(|&x| x as f32).collect()],
                    special: Vec::new(),
                })
            })
            .collect()
    }
}
