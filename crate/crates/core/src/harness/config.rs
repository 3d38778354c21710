use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::embedding::{Embedder, EmbeddingCache, HashingProvider, PrecomputedProvider, RemoteEncoder, TokenProvider};
use crate::eval::{EvaluationConfig, Strategy};
use crate::llm::{HttpChatClient, SamplingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.8
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fraction: default_fraction(),
            seed: 0,
        }
    }
}

/// Where token vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// Deterministic hashed word vectors; needs no model.
    Hashing {
        #[serde(default = "default_hash_dimension")]
        dimension: usize,
        #[serde(default)]
        seed: u64,
    },
    /// An HTTP encoder service returning per-token vectors.
    Remote {
        endpoint: String,
        model: String,
        dimension: usize,
        /// Environment variable holding a bearer token, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_token_env: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_size: Option<usize>,
    },
    /// Document vectors computed elsewhere, keyed by review id.
    File { path: PathBuf },
}

fn default_hash_dimension() -> usize {
    HashingProvider::DEFAULT_DIMENSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    #[serde(flatten)]
    pub provider: ProviderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    4
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            provider: ProviderConfig::Hashing {
                dimension: default_hash_dimension(),
                seed: 0,
            },
            max_tokens: None,
            parallelism: default_parallelism(),
        }
    }
}

impl EmbedderConfig {
    pub fn build_provider(&self) -> Result<Arc<dyn TokenProvider>, HarnessError> {
        Ok(match &self.provider {
            ProviderConfig::Hashing { dimension, seed } => Arc::new(HashingProvider::new(*dimension, *seed)),
            ProviderConfig::Remote {
                endpoint,
                model,
                dimension,
                auth_token_env,
                batch_size,
            } => {
                let token = auth_token_env.as_deref().and_then(|v| std::env::var(v).ok());
                let mut enc = RemoteEncoder::new(endpoint, model, *dimension).with_auth_token(token);
                if let Some(b) = batch_size {
                    enc = enc.with_batch_size(*b);
                }
                Arc::new(enc)
            }
            ProviderConfig::File { path } => {
                Arc::new(PrecomputedProvider::open(path).map_err(|e| HarnessError::stage("embed", None, e))?)
            }
        })
    }

    pub fn build(&self, provider: Arc<dyn TokenProvider>, cache: Option<Arc<EmbeddingCache>>) -> Embedder {
        let mut e = Embedder::new(provider)
            .with_parallelism(self.parallelism)
            .with_max_tokens(self.max_tokens);
        if let Some(c) = cache {
            e = e.with_cache(c);
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    /// Environment variable holding the API key. Keys never appear in
    /// configuration files or flags.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub sampling: SamplingParams,
}

fn default_endpoint() -> String {
    HttpChatClient::DEFAULT_ENDPOINT.to_string()
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_concurrency() -> usize {
    4
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: default_endpoint(),
            api_key_env: default_key_env(),
            concurrency: default_concurrency(),
            sampling: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingConfig {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Rewritten corpus for the `human` setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processed: Option<PathBuf>,
    /// Per-setting chat endpoint, for models served elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl SettingConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            model: None,
            processed: None,
            endpoint: None,
            api_key_env: None,
        }
    }

    pub fn setting_id(&self) -> String {
        self.strategy.setting_id(self.model.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    pub settings: Vec<SettingConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

/// Replaces `${NAME}` with the value of environment variable `NAME`.
/// `$${` escapes a literal `${`.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, HarnessError> {
    let re = Regex::new(r"\$(\$?)\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid pattern");
    let mut missing = None;
    let out = re.replace_all(text, |c: &Captures| {
        if !c[1].is_empty() {
            return format!("${{{}}}", &c[2]);
        }
        match lookup(&c[2]) {
            Some(v) => v,
            None => {
                missing.get_or_insert_with(|| c[2].to_string());
                String::new()
            }
        }
    });
    match missing {
        Some(name) => Err(HarnessError::config(format!("environment variable {name} is not set"))),
        None => Ok(out.into_owned()),
    }
}

impl ExperimentConfig {
    /// Parses TOML after environment interpolation. Relative paths are
    /// resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_with(text, base_dir, |k| std::env::var(k).ok())
    }

    /// Like [`ExperimentConfig::from_toml`] with an explicit variable lookup.
    pub fn from_toml_with(
        text: &str,
        base_dir: &Path,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, HarnessError> {
        let text = interpolate_env(text, lookup)?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let ProviderConfig::File { path } = &mut self.embedder.provider {
            fix(path);
        }
        for s in &mut self.settings {
            if let Some(p) = s.processed.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::config(m));
        if !self.settings.iter().any(|s| s.strategy == Strategy::None) {
            return err("settings must include the `none` baseline".into());
        }
        if !self.corpus.is_file() {
            return err(format!("corpus {} does not exist", self.corpus.display()));
        }
        if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
            return err(format!("split fraction {} must lie in (0, 1)", self.split.fraction));
        }
        self.evaluation
            .validate()
            .map_err(|e| HarnessError::config(e.to_string()))?;
        if self.embedder.parallelism == 0 || self.llm.concurrency == 0 {
            return err("parallelism and concurrency must be at least 1".into());
        }
        let file_provider = match &self.embedder.provider {
            ProviderConfig::File { path } => {
                if !path.is_file() {
                    return err(format!("embedding file {} does not exist", path.display()));
                }
                true
            }
            ProviderConfig::Hashing { dimension, .. } | ProviderConfig::Remote { dimension, .. } => {
                if *dimension == 0 {
                    return err("embedder dimension must be positive".into());
                }
                false
            }
        };
        let mut ids = HashSet::new();
        for s in &self.settings {
            let id = s.setting_id();
            if !ids.insert(id.clone()) {
                return err(format!("setting {id} is listed twice"));
            }
            if s.strategy.needs_model() && s.model.as_deref().is_none_or(str::is_empty) {
                return err(format!("setting {} needs a model", s.strategy));
            }
            if !s.strategy.needs_model() && s.model.is_some() {
                return err(format!("setting {} takes no model", s.strategy));
            }
            match (s.strategy, &s.processed) {
                (Strategy::Human, None) => return err("the human setting needs a processed file".into()),
                (Strategy::Human, Some(p)) if !p.is_file() => {
                    return err(format!("processed file {} does not exist", p.display()))
                }
                (Strategy::Human, Some(_)) => {}
                (_, Some(_)) => return err(format!("setting {id} takes no processed file")),
                _ => {}
            }
            let rewrites = !matches!(s.strategy, Strategy::None | Strategy::MeanProjection);
            if file_provider && rewrites {
                return err(format!(
                    "setting {id} rewrites texts, which a precomputed embedding file cannot embed"
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(serde_json::to_vec(&self.canonical_json()).expect("json serializes"))
    }
}
