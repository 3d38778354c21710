//! Mean projection: erase the direction joining the two class means.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{DocumentVector, EmbeddingSet, FloatWidth};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("fit set contains only one class")]
    SingleClass,
    #[error("class means coincide; no direction to remove")]
    ZeroGap,
    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("id {0:?} missing from embeddings or labels")]
    MissingId(String),
    #[error("guard direction has norm {0}, expected 1")]
    NotUnit(f64),
    #[error("guard file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub label_name: String,
    pub fit_id_digest: String,
    pub mean_gap_norm: f64,
    pub positive_count: usize,
    pub negative_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGuard {
    pub dimension: usize,
    pub direction: Vec<f64>,
    pub fit_metadata: FitMetadata,
}

/// Fits the unit direction `(mean_pos - mean_neg) / |mean_pos - mean_neg|`
/// over `fit_ids` only. `labels[id] == true` marks the positive class.
pub fn fit_mean_projection(
    embeddings: &EmbeddingSet,
    labels: &BTreeMap<String, bool>,
    fit_ids: &BTreeSet<String>,
    label_name: &str,
) -> Result<ProjectionGuard, ProjectionError> {
    let dim = embeddings.dimension;
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for id in fit_ids {
        let x = embeddings
            .get(id)
            .ok_or_else(|| ProjectionError::MissingId(id.clone()))?;
        let label = *labels.get(id).ok_or_else(|| ProjectionError::MissingId(id.clone()))?;
        let k = label as usize;
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(x) {
            *s += v;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(ProjectionError::SingleClass);
    }
    let gap: Vec<f64> = sums[1]
        .iter()
        .zip(&sums[0])
        .map(|(p, n)| p / counts[1] as f64 - n / counts[0] as f64)
        .collect();
    let norm = gap.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(ProjectionError::ZeroGap);
    }
    let fit_id_digest = crate::digest::sha256_fields(fit_ids.iter().map(|s| s.as_bytes()));
    Ok(ProjectionGuard {
        dimension: dim,
        direction: gap.into_iter().map(|g| g / norm).collect(),
        fit_metadata: FitMetadata {
            label_name: label_name.to_string(),
            fit_id_digest,
            mean_gap_norm: norm,
            positive_count: counts[1],
            negative_count: counts[0],
        },
    })
}

impl ProjectionGuard {
    /// `x - <x, v> v`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        if x.len() != self.dimension {
            return Err(ProjectionError::DimensionMismatch {
                expected: self.dimension,
                actual: x.len(),
            });
        }
        let dot: f64 = x.iter().zip(&self.direction).map(|(a, b)| a * b).sum();
        Ok(x.iter().zip(&self.direction).map(|(a, v)| a - dot * v).collect())
    }

    /// Projects every vector; the result keeps full precision.
    pub fn apply_to_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet, ProjectionError> {
        let mut out = EmbeddingSet::new(
            format!("{}+mean-projection", set.provider_id),
            set.dimension,
            FloatWidth::F64,
        );
        for (id, x) in &set.vectors {
            out.vectors.insert(id.clone(), self.project(x)?);
        }
        Ok(out)
    }

    fn check(&self) -> Result<(), ProjectionError> {
        if self.direction.len() != self.dimension {
            return Err(ProjectionError::DimensionMismatch {
                expected: self.dimension,
                actual: self.direction.len(),
            });
        }
        let norm = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(ProjectionError::NotUnit(norm));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProjectionError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("guard serializes");
        std::fs::write(path, json + "\n").map_err(|e| ProjectionError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProjectionError> {
        let path = path.as_ref();
        let err = |message: String| ProjectionError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let guard: ProjectionGuard = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        guard.check()?;
        Ok(guard)
    }
}

pub fn apply_projection(guard: &ProjectionGuard, x: &DocumentVector) -> Result<DocumentVector, ProjectionError> {
    Ok(DocumentVector {
        review_id: x.review_id.clone(),
        values: guard.project(&x.values)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set_and_labels(pos: &[[f64; 2]], neg: &[[f64; 2]]) -> (EmbeddingSet, BTreeMap<String, bool>) {
        let mut set = EmbeddingSet::new("t", 2, FloatWidth::F64);
        let mut labels = BTreeMap::new();
        for (i, p) in pos.iter().enumerate() {
            set.insert(format!("p{i}"), p.to_vec()).unwrap();
            labels.insert(format!("p{i}"), true);
        }
        for (i, n) in neg.iter().enumerate() {
            set.insert(format!("n{i}"), n.to_vec()).unwrap();
            labels.insert(format!("n{i}"), false);
        }
        (set, labels)
    }

    fn all_ids(set: &EmbeddingSet) -> BTreeSet<String> {
        set.vectors.keys().cloned().collect()
    }

    fn doc(values: Vec<f64>) -> DocumentVector {
        DocumentVector {
            review_id: "x".into(),
            values,
        }
    }

    #[test]
    fn hand_computed_direction() {
        let (set, labels) = set_and_labels(&[[2.0, 1.0], [2.0, 3.0]], &[[0.0, 1.0], [0.0, 3.0]]);
        let guard = fit_mean_projection(&set, &labels, &all_ids(&set), "sentiment").unwrap();
        assert_eq!(guard.direction, vec![1.0, 0.0]);
        assert_eq!(guard.fit_metadata.mean_gap_norm, 2.0);
    }

    #[test]
    fn swapping_classes_negates_direction_only() {
        let (set, labels) = set_and_labels(&[[2.0, 1.0], [3.0, 3.0]], &[[0.0, 1.0], [0.5, 2.0]]);
        let flipped: BTreeMap<String, bool> = labels.iter().map(|(k, v)| (k.clone(), !v)).collect();
        let a = fit_mean_projection(&set, &labels, &all_ids(&set), "s").unwrap();
        let b = fit_mean_projection(&set, &flipped, &all_ids(&set), "s").unwrap();
        for (x, y) in a.direction.iter().zip(&b.direction) {
            assert!((x + y).abs() < 1e-15);
        }
        let x = doc(vec![0.3, -1.7]);
        let pa = apply_projection(&a, &x).unwrap().values;
        let pb = apply_projection(&b, &x).unwrap().values;
        for (u, w) in pa.iter().zip(&pb) {
            assert!((u - w).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_errors() {
        let (set, labels) = set_and_labels(&[[2.0, 1.0], [2.0, 3.0]], &[]);
        assert!(matches!(
            fit_mean_projection(&set, &labels, &all_ids(&set), "s"),
            Err(ProjectionError::SingleClass)
        ));
        let (set, labels) = set_and_labels(&[[1.0, 1.0]], &[[1.0, 1.0]]);
        assert!(matches!(
            fit_mean_projection(&set, &labels, &all_ids(&set), "s"),
            Err(ProjectionError::ZeroGap)
        ));
        let mut ids = all_ids(&set);
        ids.insert("ghost".into());
        assert!(matches!(
            fit_mean_projection(&set, &labels, &ids, "s"),
            Err(ProjectionError::MissingId(_))
        ));
    }

    #[test]
    fn fit_uses_only_fit_ids() {
        let (set, labels) = set_and_labels(&[[2.0, 0.0], [0.0, 50.0]], &[[0.0, 0.0]]);
        let ids: BTreeSet<String> = ["p0", "n0"].iter().map(|s| s.to_string()).collect();
        let guard = fit_mean_projection(&set, &labels, &ids, "s").unwrap();
        assert_eq!(guard.direction, vec![1.0, 0.0]);
    }

    #[test]
    fn apply_examples() {
        let (set, labels) = set_and_labels(&[[2.0, 1.0], [2.0, 3.0]], &[[0.0, 1.0], [0.0, 3.0]]);
        let guard = fit_mean_projection(&set, &labels, &all_ids(&set), "s").unwrap();
        assert_eq!(
            apply_projection(&guard, &doc(vec![1.0, 0.5])).unwrap().values,
            vec![0.0, 0.5]
        );
        assert_eq!(
            apply_projection(&guard, &doc(vec![3.0, 0.0])).unwrap().values,
            vec![0.0, 0.0]
        );
        assert_eq!(
            apply_projection(&guard, &doc(vec![0.0, 4.0])).unwrap().values,
            vec![0.0, 4.0]
        );
        assert!(matches!(
            apply_projection(&guard, &doc(vec![1.0])),
            Err(ProjectionError::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn guard_file_round_trip_and_validation() {
        let (set, labels) = set_and_labels(&[[2.0, 1.0], [2.5, 3.0]], &[[0.0, 1.0], [0.0, 3.0]]);
        let guard = fit_mean_projection(&set, &labels, &all_ids(&set), "s").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("guard.json");
        guard.save(&path).unwrap();
        assert_eq!(ProjectionGuard::load(&path).unwrap(), guard);

        let mut bad = guard.clone();
        bad.direction = vec![2.0, 0.0];
        bad.save(&path).unwrap();
        assert!(matches!(ProjectionGuard::load(&path), Err(ProjectionError::NotUnit(_))));
    }

    #[test]
    fn projected_fit_means_coincide_along_direction() {
        let (set, labels) = set_and_labels(
            &[[2.0, 1.0], [3.0, 3.0], [1.0, 0.0]],
            &[[0.0, 1.0], [0.5, 2.0], [-1.0, 4.0]],
        );
        let guard = fit_mean_projection(&set, &labels, &all_ids(&set), "s").unwrap();
        let projected = guard.apply_to_set(&set).unwrap();
        let mean_along = |positive: bool| {
            let rows: Vec<&Vec<f64>> = projected
                .vectors
                .iter()
                .filter(|(id, _)| labels[*id] == positive)
                .map(|(_, v)| v)
                .collect();
            rows.iter()
                .map(|v| v.iter().zip(&guard.direction).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                / rows.len() as f64
        };
        assert!((mean_along(true) - mean_along(false)).abs() < 1e-12);
    }

    fn unit_guard(raw: Vec<f64>) -> Option<ProjectionGuard> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm > 1e-3).then(|| ProjectionGuard {
            dimension: raw.len(),
            direction: raw.iter().map(|v| v / norm).collect(),
            fit_metadata: FitMetadata {
                label_name: "s".into(),
                fit_id_digest: String::new(),
                mean_gap_norm: norm,
                positive_count: 1,
                negative_count: 1,
            },
        })
    }

    proptest! {
        #[test]
        fn orthogonal_idempotent_contractive(
            dir in proptest::collection::vec(-10.0f64..10.0, 6),
            x in proptest::collection::vec(-100.0f64..100.0, 6),
        ) {
            let Some(guard) = unit_guard(dir) else { return Ok(()); };
            let once = guard.project(&x).unwrap();
            let twice = guard.project(&once).unwrap();
            let dot: f64 = once.iter().zip(&guard.direction).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() <= 1e-6);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(n(&once) <= n(&x) + 1e-9);
        }
    }
}
