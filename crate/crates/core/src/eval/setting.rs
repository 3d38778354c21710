use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_accuracy, AccuracyCI};
use super::{EvalError, EvaluationConfig};
use crate::corpus::{Review, SplitSpec, Topic};
use crate::embedding::{Embedder, EmbeddingSet};
use crate::llm::{ProcessedReview, TextStrategy};
use crate::projection::{fit_mean_projection, ProjectionGuard};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    MeanProjection,
    Human,
    Paraphrase,
    FewShot,
    Chain,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::MeanProjection => "mean_projection",
            Strategy::Human => "human",
            Strategy::Paraphrase => "paraphrase",
            Strategy::FewShot => "few_shot",
            Strategy::Chain => "chain",
        }
    }

    pub fn text_strategy(self) -> Option<TextStrategy> {
        match self {
            Strategy::Paraphrase => Some(TextStrategy::Paraphrase),
            Strategy::FewShot => Some(TextStrategy::FewShot),
            Strategy::Chain => Some(TextStrategy::Chain),
            _ => None,
        }
    }

    pub fn needs_model(self) -> bool {
        self.text_strategy().is_some()
    }

    /// `none`, `mean_projection` and `human` name themselves; model-driven
    /// settings are `{model}/{strategy}`.
    pub fn setting_id(self, model: Option<&str>) -> String {
        match (self.text_strategy(), model) {
            (Some(_), Some(m)) => format!("{m}/{}", self.as_str()),
            _ => self.as_str().to_string(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Strategy::None),
            "mean_projection" | "mean-projection" => Ok(Strategy::MeanProjection),
            "human" => Ok(Strategy::Human),
            other => other
                .parse::<TextStrategy>()
                .map(|t| match t {
                    TextStrategy::Paraphrase => Strategy::Paraphrase,
                    TextStrategy::FewShot => Strategy::FewShot,
                    TextStrategy::Chain => Strategy::Chain,
                })
                .map_err(|_| format!("unknown strategy {other:?}")),
        }
    }
}

/// One row of the comparison: both classifiers evaluated on the same split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub setting_id: String,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub sentiment: AccuracyCI,
    pub topic: AccuracyCI,
    /// Fraction of the corpus the setting covers.
    pub coverage: f64,
    pub covered: usize,
    pub corpus_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub embedding_digest: String,
}

/// How a setting transforms the corpus before classification.
#[derive(Debug, Clone, Copy)]
pub enum GuardInput<'a> {
    /// Original texts.
    None,
    /// Rewritten texts; may cover a subset of the corpus.
    Text(&'a [ProcessedReview]),
    /// Mean projection fitted on the train split of the original embeddings.
    MeanProjection,
}

/// Embeddings and split a setting is evaluated on.
#[derive(Debug, Clone)]
pub struct PreparedFeatures {
    pub embeddings: EmbeddingSet,
    pub split: SplitSpec,
    pub covered: usize,
    pub corpus_size: usize,
    pub projection: Option<ProjectionGuard>,
}

/// Embeds the guard's texts (keyed by source id) or the original texts,
/// fitting and applying the projection where asked.
pub fn prepare_features(
    corpus: &[Review],
    guard: GuardInput<'_>,
    embedder: &Embedder,
    split: &SplitSpec,
    min_coverage: f64,
) -> Result<PreparedFeatures, EvalError> {
    let originals: HashMap<&str, &Review> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut texts = BTreeMap::new();
    match guard {
        GuardInput::Text(processed) => {
            for p in processed {
                if !originals.contains_key(p.source_id.as_str()) {
                    return Err(EvalError::IdMismatch {
                        processed: p.id.clone(),
                        source_id: p.source_id.clone(),
                    });
                }
                if texts.insert(p.source_id.clone(), p.text.clone()).is_some() {
                    return Err(EvalError::IdMismatch {
                        processed: p.id.clone(),
                        source_id: p.source_id.clone(),
                    });
                }
            }
        }
        GuardInput::None | GuardInput::MeanProjection => {
            texts.extend(corpus.iter().map(|r| (r.id.clone(), r.text.clone())));
        }
    }
    let covered = texts.len();
    if (covered as f64) < min_coverage * corpus.len() as f64 || covered == 0 {
        return Err(EvalError::Coverage {
            covered,
            total: corpus.len(),
            minimum: min_coverage,
        });
    }
    let keep: BTreeSet<String> = texts.keys().cloned().collect();
    let split = if covered == corpus.len() {
        split.clone()
    } else {
        split.restrict_to(&keep)
    };
    if let Some(id) = split
        .train_ids
        .iter()
        .chain(&split.test_ids)
        .find(|id| !originals.contains_key(id.as_str()))
    {
        return Err(EvalError::MissingId(id.clone()));
    }

    let embeddings = embedder.embed_corpus(&texts)?;
    let (embeddings, projection) = match guard {
        GuardInput::MeanProjection => {
            let labels: BTreeMap<String, bool> = corpus
                .iter()
                .map(|r| (r.id.clone(), r.sentiment.class_index() == 1))
                .collect();
            let fitted = fit_mean_projection(&embeddings, &labels, &split.train_ids, "sentiment")?;
            (fitted.apply_to_set(&embeddings)?, Some(fitted))
        }
        _ => (embeddings, None),
    };
    Ok(PreparedFeatures {
        embeddings,
        split,
        covered,
        corpus_size: corpus.len(),
        projection,
    })
}

/// Sentiment and topic accuracy intervals on prepared features. Labels
/// always come from the original reviews.
pub fn evaluate_features(
    features: &PreparedFeatures,
    corpus: &[Review],
    config: &EvaluationConfig,
) -> Result<(AccuracyCI, AccuracyCI), EvalError> {
    config.validate()?;
    let sentiment: BTreeMap<String, usize> = corpus
        .iter()
        .map(|r| (r.id.clone(), r.sentiment.class_index()))
        .collect();
    let topic: BTreeMap<String, usize> = corpus.iter().map(|r| (r.id.clone(), r.topic.class_index())).collect();
    let logistic = config.logistic();
    let bootstrap = config.bootstrap();
    let s = bootstrap_accuracy(
        &features.embeddings,
        &sentiment,
        2,
        &features.split,
        &logistic,
        &bootstrap,
    )?;
    let t = bootstrap_accuracy(
        &features.embeddings,
        &topic,
        Topic::ALL.len(),
        &features.split,
        &logistic,
        &bootstrap,
    )?;
    Ok((s, t))
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_setting(
    strategy: Strategy,
    model: Option<&str>,
    corpus: &[Review],
    guard: GuardInput<'_>,
    embedder: &Embedder,
    split: &SplitSpec,
    config: &EvaluationConfig,
) -> Result<SettingResult, EvalError> {
    let features = prepare_features(corpus, guard, embedder, split, config.min_coverage)?;
    let (sentiment, topic) = evaluate_features(&features, corpus, config)?;
    Ok(SettingResult::assemble(strategy, model, &features, sentiment, topic))
}

impl SettingResult {
    pub fn assemble(
        strategy: Strategy,
        model: Option<&str>,
        features: &PreparedFeatures,
        sentiment: AccuracyCI,
        topic: AccuracyCI,
    ) -> Self {
        SettingResult {
            setting_id: strategy.setting_id(model),
            strategy,
            model: model.map(str::to_string),
            sentiment,
            topic,
            coverage: features.covered as f64 / features.corpus_size as f64,
            covered: features.covered,
            corpus_size: features.corpus_size,
            train_size: features.split.train_ids.len(),
            test_size: features.split.test_ids.len(),
            embedding_digest: features.embeddings.digest(),
        }
    }
}
