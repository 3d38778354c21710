//! Document embeddings: token providers, mean pooling, caching and the
//! embedding file formats.

mod cache;
mod file;
mod provider;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::EmbeddingCache;
pub use file::{read_embeddings, write_embeddings};
pub use provider::{HashingProvider, PrecomputedProvider, RemoteEncoder, TokenProvider, TokenVectors};

use crate::retry::RetryPolicy;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("review {0}: no tokens to pool")]
    EmptyTokens(String),
    #[error("review {review_id}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        review_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("review {0}: non-finite embedding value")]
    NonFinite(String),
    #[error("provider failed for {} review(s): {}", .ids.len(), .ids.join(", "))]
    ProviderFailed { ids: Vec<String>, last_error: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("no texts to embed")]
    NoTexts,
    #[error("embedding file {path}: {message}")]
    Format { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Token-level vectors for one review. An entry of `special` marks a
/// provider-reported special or padding token; those are skipped by pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingBatch {
    pub review_id: String,
    pub vectors: Vec<Vec<f32>>,
    pub special: Vec<bool>,
}

impl TokenEmbeddingBatch {
    pub fn new(review_id: impl Into<String>, vectors: Vec<Vec<f32>>) -> Self {
        Self {
            review_id: review_id.into(),
            vectors,
            special: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentVector {
    pub review_id: String,
    pub values: Vec<f64>,
}

/// Component-wise arithmetic mean of the non-special token vectors.
pub fn pool_tokens(batch: &TokenEmbeddingBatch) -> Result<DocumentVector, EmbeddingError> {
    let mut kept = batch
        .vectors
        .iter()
        .enumerate()
        .filter(|(i, _)| !batch.special.get(*i).copied().unwrap_or(false))
        .map(|(_, v)| v);
    let first = kept
        .next()
        .ok_or_else(|| EmbeddingError::EmptyTokens(batch.review_id.clone()))?;
    let dim = first.len();
    let mut sum: Vec<f64> = first.iter().map(|&v| v as f64).collect();
    let mut count = 1usize;
    for v in kept {
        if v.len() != dim {
            return Err(EmbeddingError::DimensionMismatch {
                review_id: batch.review_id.clone(),
                expected: dim,
                actual: v.len(),
            });
        }
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x as f64;
        }
        count += 1;
    }
    let n = count as f64;
    let values: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFinite(batch.review_id.clone()));
    }
    Ok(DocumentVector {
        review_id: batch.review_id.clone(),
        values,
    })
}

/// Storage width of vector components on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FloatWidth {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl FloatWidth {
    pub fn bits(self) -> u32 {
        match self {
            FloatWidth::F32 => 32,
            FloatWidth::F64 => 64,
        }
    }
}

/// Id-keyed document vectors of a single dimension, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub provider_id: String,
    pub dimension: usize,
    pub float_width: FloatWidth,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(provider_id: impl Into<String>, dimension: usize, float_width: FloatWidth) -> Self {
        Self {
            provider_id: provider_id.into(),
            dimension,
            float_width,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<(), EmbeddingError> {
        let id = id.into();
        if values.len() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                review_id: id,
                expected: self.dimension,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(id));
        }
        self.vectors.insert(id, values);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Digest of the canonical binary encoding.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        file::encode_binary(self, &mut buf).expect("writing to a Vec cannot fail");
        crate::digest::sha256_hex(buf)
    }
}

/// Turns texts into an [`EmbeddingSet`] through a provider, with a bounded
/// thread pool, retries, head-first truncation and an optional cache.
pub struct Embedder {
    provider: Arc<dyn TokenProvider>,
    cache: Option<Arc<EmbeddingCache>>,
    parallelism: usize,
    max_tokens: Option<usize>,
    retry: RetryPolicy,
    provider_calls: AtomicUsize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn TokenProvider>) -> Self {
        Self {
            provider,
            cache: None,
            parallelism: 1,
            max_tokens: None,
            retry: RetryPolicy::default(),
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Arc<EmbeddingCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    /// Keep only the first `max_tokens` tokens of each text.
    pub fn with_max_tokens(mut self, max_tokens: Option<usize>) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Identifier including the truncation setting, so cached vectors from a
    /// different configuration are never reused.
    pub fn provider_id(&self) -> String {
        match self.max_tokens {
            Some(n) => format!("{}+trunc{n}", self.provider.provider_id()),
            None => self.provider.provider_id(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    /// Number of provider round trips issued so far.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    fn pool_one(&self, id: &str, mut tokens: TokenVectors) -> Result<Vec<f32>, EmbeddingError> {
        if let Some(limit) = self.max_tokens {
            if tokens.vectors.len() > limit {
                log::info!("review {id}: truncated from {} to {limit} tokens", tokens.vectors.len());
                tokens.vectors.truncate(limit);
                tokens.special.truncate(limit);
            }
        }
        let batch = TokenEmbeddingBatch {
            review_id: id.to_string(),
            vectors: tokens.vectors,
            special: tokens.special,
        };
        let doc = pool_tokens(&batch)?;
        if doc.values.len() != self.dimension() {
            return Err(EmbeddingError::DimensionMismatch {
                review_id: id.to_string(),
                expected: self.dimension(),
                actual: doc.values.len(),
            });
        }
        Ok(doc.values.iter().map(|&v| v as f32).collect())
    }

    fn embed_batch(&self, batch: &[(&String, &String)]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        let items: Vec<(&str, &str)> = batch.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
        let tokens = self.retry.run("embedding provider", |_| {
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            self.provider.embed_tokens(&items)
        })?;
        if tokens.len() != items.len() {
            return Err(EmbeddingError::Provider(format!(
                "provider returned {} results for {} texts",
                tokens.len(),
                items.len()
            )));
        }
        items
            .iter()
            .zip(tokens)
            .map(|((id, _), t)| self.pool_one(id, t))
            .collect()
    }

    /// Embeds every text; the result is sorted by id and does not depend on
    /// the degree of parallelism.
    pub fn embed_corpus(&self, texts: &BTreeMap<String, String>) -> Result<EmbeddingSet, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::NoTexts);
        }
        let provider_id = self.provider_id();
        let use_cache = self.provider.cacheable();
        let mut pooled: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut missing = Vec::new();
        for (id, text) in texts {
            let hit = match (&self.cache, use_cache) {
                (Some(cache), true) => cache.get(&provider_id, text),
                _ => None,
            };
            match hit {
                Some(v) => {
                    pooled.insert(id.clone(), v);
                }
                None => missing.push((id, text)),
            }
        }

        if !missing.is_empty() {
            let batches: Vec<&[(&String, &String)]> = missing.chunks(self.provider.max_batch().max(1)).collect();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.parallelism)
                .build()
                .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
            let results: Vec<Result<Vec<Vec<f32>>, EmbeddingError>> =
                pool.install(|| batches.par_iter().map(|b| self.embed_batch(b)).collect());

            let mut failed = Vec::new();
            let mut last_error = None;
            for (batch, result) in batches.iter().zip(results) {
                match result {
                    Ok(vectors) => {
                        for ((id, text), v) in batch.iter().zip(vectors) {
                            if let (Some(cache), true) = (&self.cache, use_cache) {
                                cache.put(&provider_id, text, &v);
                            }
                            pooled.insert((*id).clone(), v);
                        }
                    }
                    Err(e @ EmbeddingError::DimensionMismatch { .. }) => return Err(e),
                    Err(e) => {
                        failed.extend(batch.iter().map(|(id, _)| (*id).clone()));
                        last_error = Some(e.to_string());
                    }
                }
            }
            if !failed.is_empty() {
                return Err(EmbeddingError::ProviderFailed {
                    ids: failed,
                    last_error: last_error.unwrap_or_default(),
                });
            }
        }

        let mut set = EmbeddingSet::new(provider_id, self.dimension(), FloatWidth::F32);
        for (id, v) in pooled {
            set.insert(id, v.into_iter().map(f64::from).collect())?;
        }
        Ok(set)
    }
}
