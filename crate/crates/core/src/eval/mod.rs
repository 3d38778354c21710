//! Guardedness measurement: logistic classifiers on document embeddings,
//! bootstrap confidence intervals and the comparison report.

mod bootstrap;
mod logistic;
mod report;
mod setting;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bootstrap::{bootstrap_accuracy, percentile, AccuracyCI, BootstrapConfig, BootstrapMode};
pub use logistic::{
    logistic_objective, train_classifier, train_logistic, train_logistic_traced, Classifier, LogisticConfig,
    LogisticModel,
};
pub use report::{build_report, Report, ReportProvenance};
pub use setting::{
    evaluate_features, evaluate_setting, prepare_features, GuardInput, PreparedFeatures, SettingResult, Strategy,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("no embedding or label for id {0:?}")]
    MissingId(String),
    #[error("replicate {replicate} drew a single class {redraws} times in a row")]
    Resample { replicate: usize, redraws: usize },
    #[error("coverage {covered}/{total} is below the configured minimum {minimum}")]
    Coverage { covered: usize, total: usize, minimum: f64 },
    #[error("processed review {processed:?} refers to unknown source {source_id:?}")]
    IdMismatch { processed: String, source_id: String },
    #[error("report needs at least one setting result")]
    EmptyReport,
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Projection(#[from] crate::projection::ProjectionError),
}

/// Row-major dense matrix of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self, EvalError> {
        let mut data = Vec::new();
        let mut cols = None;
        let mut n = 0;
        for row in rows {
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(EvalError::Shape(format!(
                        "row {n} has {} columns, expected {c}",
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(row);
            n += 1;
        }
        Ok(Self {
            rows: n,
            cols: cols.unwrap_or(0),
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// New matrix made of the given rows, repeats allowed.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    fn map_rows(&self, f: impl Fn(&[f64], &mut [f64])) -> FeatureMatrix {
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(self.cols.max(1)) {
            let src = chunk.to_vec();
            f(&src, chunk);
        }
        FeatureMatrix { data, ..*self }
    }
}

/// Per-dimension centering and scaling fitted on training rows. Constant
/// columns keep scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &FeatureMatrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mut mean = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, x: &FeatureMatrix) -> FeatureMatrix {
        x.map_rows(|src, dst| {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = (src[j] - self.mean[j]) / self.scale[j];
            }
        })
    }
}

/// Classifier and bootstrap settings shared by every setting of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub regularization: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub mode: BootstrapMode,
    pub standardize: bool,
    /// Smallest fraction of the corpus a text guard must cover.
    pub min_coverage: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let l = LogisticConfig::default();
        let b = BootstrapConfig::default();
        Self {
            regularization: l.regularization_strength,
            tolerance: l.tolerance,
            max_iterations: l.max_iterations,
            replicates: b.replicates,
            level: b.level,
            seed: b.seed,
            mode: b.mode,
            standardize: false,
            min_coverage: 0.05,
        }
    }
}

impl EvaluationConfig {
    pub fn logistic(&self) -> LogisticConfig {
        LogisticConfig {
            regularization_strength: self.regularization,
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.replicates,
            level: self.level,
            seed: self.seed,
            mode: self.mode,
            standardize: self.standardize,
            ..BootstrapConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(m.to_string()));
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return bad("regularization must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return bad("min_coverage must lie in [0, 1]");
        }
        Ok(())
    }
}
