use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::{train_classifier, Classifier, LogisticConfig};
use super::{EvalError, FeatureMatrix, Standardizer};
use crate::corpus::{uniform_index, SplitSpec};
use crate::digest::mix_seed;
use crate::embedding::EmbeddingSet;

/// What a replicate resamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Retrain on a resampled training split, score the fixed test split.
    #[default]
    Train,
    /// Keep the full-split model, resample its test predictions.
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub mode: BootstrapMode,
    pub standardize: bool,
    pub max_redraws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 500,
            level: 0.95,
            seed: 0,
            mode: BootstrapMode::Train,
            standardize: false,
            max_redraws: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    /// Replicates redrawn because the resample missed a class.
    pub redraws: usize,
    /// Fits (point model included) that hit the iteration limit.
    pub unconverged: usize,
}

impl AccuracyCI {
    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (position `q * (n - 1)`).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct Fitted {
    classifier: Classifier,
    standardizer: Option<Standardizer>,
}

impl Fitted {
    fn train(
        x: &FeatureMatrix,
        y: &[usize],
        n_classes: usize,
        logistic: &LogisticConfig,
        standardize: bool,
    ) -> Result<Self, EvalError> {
        let standardizer = standardize.then(|| Standardizer::fit(x));
        let classifier = match &standardizer {
            Some(s) => train_classifier(&s.transform(x), y, n_classes, logistic)?,
            None => train_classifier(x, y, n_classes, logistic)?,
        };
        Ok(Self {
            classifier,
            standardizer,
        })
    }

    fn correct(&self, x: &FeatureMatrix, y: &[usize]) -> Vec<bool> {
        let x = match &self.standardizer {
            Some(s) => s.transform(x),
            None => x.clone(),
        };
        y.iter()
            .enumerate()
            .map(|(i, &l)| self.classifier.predict(x.row(i)) == l)
            .collect()
    }
}

fn gather(
    embeddings: &EmbeddingSet,
    labels: &BTreeMap<String, usize>,
    ids: &BTreeSet<String>,
) -> Result<(FeatureMatrix, Vec<usize>), EvalError> {
    let mut rows = Vec::with_capacity(ids.len());
    let mut y = Vec::with_capacity(ids.len());
    for id in ids {
        let row = embeddings.get(id).ok_or_else(|| EvalError::MissingId(id.clone()))?;
        let label = labels.get(id).ok_or_else(|| EvalError::MissingId(id.clone()))?;
        rows.push(row);
        y.push(*label);
    }
    let x = FeatureMatrix::from_rows(rows)?;
    Ok((x, y))
}

fn accuracy(correct: &[bool]) -> f64 {
    correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}

/// Test accuracy of a classifier trained on the train split, with a
/// percentile interval over `replicates` bootstrap replicates. Rows are
/// taken in sorted-id order and replicate `b` draws from its own seed
/// `mix_seed(seed, b)`, so the result depends only on the inputs and the
/// seed, not on thread scheduling or input order.
pub fn bootstrap_accuracy(
    embeddings: &EmbeddingSet,
    labels: &BTreeMap<String, usize>,
    n_classes: usize,
    split: &SplitSpec,
    logistic: &LogisticConfig,
    config: &BootstrapConfig,
) -> Result<AccuracyCI, EvalError> {
    if config.replicates == 0 {
        return Err(EvalError::Config("replicates must be at least 1".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(EvalError::Config("level must lie in (0, 1)".into()));
    }
    if split.test_ids.is_empty() {
        return Err(EvalError::Shape("empty test split".into()));
    }
    let (x_train, y_train) = gather(embeddings, labels, &split.train_ids)?;
    let (x_test, y_test) = gather(embeddings, labels, &split.test_ids)?;

    let point_model = Fitted::train(&x_train, &y_train, n_classes, logistic, config.standardize)?;
    let point_correct = point_model.correct(&x_test, &y_test);
    let point = accuracy(&point_correct);
    let mut unconverged = usize::from(!point_model.classifier.converged());

    let present: BTreeSet<usize> = y_train.iter().copied().collect();
    let n_train = y_train.len();
    let n_test = y_test.len();

    let replicate = |b: usize| -> Result<(f64, usize, bool), EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, b as u64));
        match config.mode {
            BootstrapMode::Test => {
                let correct: usize = (0..n_test)
                    .filter(|_| point_correct[uniform_index(&mut rng, n_test)])
                    .count();
                Ok((correct as f64 / n_test as f64, 0, true))
            }
            BootstrapMode::Train => {
                let mut redraws = 0;
                loop {
                    let idx: Vec<usize> = (0..n_train).map(|_| uniform_index(&mut rng, n_train)).collect();
                    let drawn: BTreeSet<usize> = idx.iter().map(|&i| y_train[i]).collect();
                    if drawn != present {
                        redraws += 1;
                        if redraws > config.max_redraws {
                            return Err(EvalError::Resample { replicate: b, redraws });
                        }
                        continue;
                    }
                    let xb = x_train.select(&idx);
                    let yb: Vec<usize> = idx.iter().map(|&i| y_train[i]).collect();
                    let model = Fitted::train(&xb, &yb, n_classes, logistic, config.standardize)?;
                    let acc = accuracy(&model.correct(&x_test, &y_test));
                    return Ok((acc, redraws, model.classifier.converged()));
                }
            }
        }
    };
    let outcomes: Vec<(f64, usize, bool)> = (0..config.replicates)
        .into_par_iter()
        .map(replicate)
        .collect::<Result<_, _>>()?;

    let redraws = outcomes.iter().map(|o| o.1).sum();
    unconverged += outcomes.iter().filter(|o| !o.2).count();
    let mut accs: Vec<f64> = outcomes.into_iter().map(|o| o.0).collect();
    accs.sort_by(f64::total_cmp);
    let alpha = (1.0 - config.level) / 2.0;
    Ok(AccuracyCI {
        point,
        lower: percentile(&accs, alpha),
        upper: percentile(&accs, 1.0 - alpha),
        replicates: config.replicates,
        level: config.level,
        seed: config.seed,
        redraws,
        unconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FloatWidth;
    use proptest::prelude::*;

    fn dataset(points: &[(f64, usize)]) -> (EmbeddingSet, BTreeMap<String, usize>) {
        let mut set = EmbeddingSet::new("t", 1, FloatWidth::F64);
        let mut labels = BTreeMap::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            set.insert(format!("r{i:03}"), vec![x]).unwrap();
            labels.insert(format!("r{i:03}"), y);
        }
        (set, labels)
    }

    fn split_by(n: usize, test_every: usize) -> SplitSpec {
        let mut s = SplitSpec {
            seed: 0,
            train_fraction: 0.8,
            train_ids: BTreeSet::new(),
            test_ids: BTreeSet::new(),
        };
        for i in 0..n {
            let id = format!("r{i:03}");
            if i % test_every == 0 {
                s.test_ids.insert(id);
            } else {
                s.train_ids.insert(id);
            }
        }
        s
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 1.0), 4.0);
        assert_eq!(percentile(&xs, 0.5), 2.5);
        assert!((percentile(&xs, 0.025) - 1.075).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn separable_data_gives_degenerate_interval() {
        let points: Vec<(f64, usize)> = (0..60)
            .map(|i| {
                if i % 2 == 0 {
                    (-1.0 - i as f64 * 0.01, 0)
                } else {
                    (1.0 + i as f64 * 0.01, 1)
                }
            })
            .collect();
        let (set, labels) = dataset(&points);
        let split = split_by(60, 5);
        let cfg = BootstrapConfig {
            replicates: 50,
            ..Default::default()
        };
        let ci = bootstrap_accuracy(&set, &labels, 2, &split, &LogisticConfig::default(), &cfg).unwrap();
        assert_eq!((ci.point, ci.lower, ci.upper), (1.0, 1.0, 1.0));
        assert_eq!(ci.half_width(), 0.0);
    }

    #[test]
    fn single_replicate_interval_is_that_replicate() {
        let points: Vec<(f64, usize)> = (0..40).map(|i| ((i as f64 * 1.7).sin(), i % 2)).collect();
        let (set, labels) = dataset(&points);
        let split = split_by(40, 4);
        let cfg = BootstrapConfig {
            replicates: 1,
            seed: 9,
            ..Default::default()
        };
        let ci = bootstrap_accuracy(&set, &labels, 2, &split, &LogisticConfig::default(), &cfg).unwrap();
        assert_eq!(ci.lower, ci.upper);
        assert!(0.0 <= ci.lower && ci.upper <= 1.0);
    }

    #[test]
    fn rare_class_exhausts_redraws() {
        // One positive among many negatives: most resamples miss it.
        let mut points: Vec<(f64, usize)> = (0..200).map(|i| (i as f64 / 200.0, 0)).collect();
        points[7] = (5.0, 1);
        let (set, labels) = dataset(&points);
        let split = split_by(200, 50);
        let cfg = BootstrapConfig {
            replicates: 20,
            max_redraws: 0,
            ..Default::default()
        };
        let err = bootstrap_accuracy(&set, &labels, 2, &split, &LogisticConfig::default(), &cfg).unwrap_err();
        assert!(matches!(err, EvalError::Resample { .. }));
    }

    #[test]
    fn test_mode_resamples_predictions() {
        let points: Vec<(f64, usize)> = (0..80).map(|i| ((i as f64 * 0.37).sin(), i % 2)).collect();
        let (set, labels) = dataset(&points);
        let split = split_by(80, 4);
        let cfg = BootstrapConfig {
            replicates: 200,
            mode: BootstrapMode::Test,
            ..Default::default()
        };
        let ci = bootstrap_accuracy(&set, &labels, 2, &split, &LogisticConfig::default(), &cfg).unwrap();
        assert!(ci.lower <= ci.point && ci.point <= ci.upper);
        assert_eq!(ci.redraws, 0);
    }

    #[test]
    fn missing_label_is_reported() {
        let (set, mut labels) = dataset(&[(0.0, 0), (1.0, 1), (2.0, 1), (3.0, 0)]);
        labels.remove("r002");
        let err = bootstrap_accuracy(
            &set,
            &labels,
            2,
            &split_by(4, 2),
            &LogisticConfig::default(),
            &BootstrapConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::MissingId(id) if id == "r002"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn bit_identical_under_insertion_order(seed in any::<u64>(), rot in 0usize..30) {
            let points: Vec<(f64, usize)> = (0..30).map(|i| ((i as f64 * 0.9 + seed as f64).cos(), i % 2)).collect();
            let (set, labels) = dataset(&points);
            let mut rotated = EmbeddingSet::new("t", 1, FloatWidth::F64);
            let mut rotated_labels = BTreeMap::new();
            let ids: Vec<&String> = set.vectors.keys().collect();
            for k in 0..ids.len() {
                let id = ids[(k + rot) % ids.len()];
                rotated.insert(id.clone(), set.get(id).unwrap().to_vec()).unwrap();
                rotated_labels.insert(id.clone(), labels[id]);
            }
            let cfg = BootstrapConfig { replicates: 20, seed, ..Default::default() };
            let split = split_by(30, 3);
            let a = bootstrap_accuracy(&set, &labels, 2, &split, &LogisticConfig::default(), &cfg).unwrap();
            let b = bootstrap_accuracy(&rotated, &rotated_labels, 2, &split, &LogisticConfig::default(), &cfg).unwrap();
            prop_assert_eq!(a.point.to_bits(), b.point.to_bits());
            prop_assert_eq!(a.lower.to_bits(), b.lower.to_bits());
            prop_assert_eq!(a.upper.to_bits(), b.upper.to_bits());
        }
    }
}
