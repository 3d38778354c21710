//! L2-regularized logistic regression fitted with L-BFGS and an Armijo
//! backtracking line search. The objective is
//!
//! ```text
//! mean_i [softplus(z_i) - y_i z_i] + (strength / 2) |w|^2,   z_i = w.x_i + b
//! ```
//!
//! with the bias left unregularized. Every accepted step satisfies the Armijo
//! condition, so the objective never increases between iterations.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{EvalError, FeatureMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub regularization_strength: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            regularization_strength: 1e-3,
            tolerance: 1e-6,
            max_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub regularization_strength: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl LogisticModel {
    pub fn decision(&self, row: &[f64]) -> f64 {
        dot(&self.weights, row) + self.bias
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        self.decision(row) > 0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Objective value and its gradient with respect to `[w.., b]`.
pub fn logistic_objective(x: &FeatureMatrix, targets: &[f64], params: &[f64], strength: f64, grad: &mut [f64]) -> f64 {
    let d = x.cols();
    debug_assert_eq!(params.len(), d + 1);
    debug_assert_eq!(grad.len(), d + 1);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let (w, b) = params.split_at(d);
    let b = b[0];
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = x.row(i);
        let z = dot(w, row) + b;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for (g, v) in grad[..d].iter_mut().zip(row) {
            *g += r * v;
        }
        grad[d] += r;
    }
    let inv_n = 1.0 / targets.len() as f64;
    loss *= inv_n;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    for (g, wj) in grad[..d].iter_mut().zip(w) {
        *g += strength * wj;
    }
    loss + 0.5 * strength * dot(w, w)
}

const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

pub fn train_logistic(x: &FeatureMatrix, labels: &[bool], config: &LogisticConfig) -> Result<LogisticModel, EvalError> {
    train_logistic_traced(x, labels, config).map(|(m, _)| m)
}

/// Like [`train_logistic`], also returning the objective after each
/// accepted step (starting with the value at zero).
pub fn train_logistic_traced(
    x: &FeatureMatrix,
    labels: &[bool],
    config: &LogisticConfig,
) -> Result<(LogisticModel, Vec<f64>), EvalError> {
    if x.rows() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} rows but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&l| l) || !labels.iter().any(|&l| !l) {
        return Err(EvalError::SingleClass);
    }
    if !(config.regularization_strength > 0.0) {
        return Err(EvalError::Config("regularization strength must be positive".into()));
    }
    let targets: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let strength = config.regularization_strength;
    let n_params = x.cols() + 1;

    let mut params = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut f = logistic_objective(x, &targets, &params, strength, &mut grad);
    let mut history = vec![f];

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut cand = vec![0.0; n_params];
    let mut cand_grad = vec![0.0; n_params];
    let mut iterations = 0;

    while iterations < config.max_iterations {
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm <= config.tolerance {
            break;
        }
        let mut direction = two_loop(&grad, &memory);
        let mut slope = dot(&grad, &direction);
        if !(slope < 0.0) {
            memory.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if memory.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            for ((c, p), d) in cand.iter_mut().zip(&params).zip(&direction) {
                *c = p + step * d;
            }
            let fc = logistic_objective(x, &targets, &cand, strength, &mut cand_grad);
            if fc <= f + ARMIJO * step * slope {
                accepted = Some(fc);
                break;
            }
            step *= 0.5;
        }
        let Some(fc) = accepted else {
            // No representable decrease left along this direction.
            break;
        };
        let s: Vec<f64> = cand.iter().zip(&params).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = cand_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if memory.len() == MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut params, &mut cand);
        std::mem::swap(&mut grad, &mut cand_grad);
        f = fc;
        history.push(f);
        iterations += 1;
    }

    let gradient_norm = dot(&grad, &grad).sqrt();
    let converged = gradient_norm <= config.tolerance;
    if !converged {
        log::warn!("logistic regression stopped after {iterations} iterations with gradient norm {gradient_norm:.3e}");
    }
    let bias = params.pop().expect("bias present");
    Ok((
        LogisticModel {
            weights: params,
            bias,
            regularization_strength: strength,
            converged,
            iterations,
            gradient_norm,
        },
        history,
    ))
}

/// L-BFGS two-loop recursion: returns `-H g`.
fn two_loop(grad: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let alpha = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), alpha) in memory.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Binary model or one-vs-rest ensemble over `n_classes` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classifier {
    Binary(LogisticModel),
    OneVsRest(Vec<LogisticModel>),
}

impl Classifier {
    /// Predicted class; one-vs-rest ties go to the lowest class index.
    pub fn predict(&self, row: &[f64]) -> usize {
        match self {
            Classifier::Binary(m) => m.predict(row) as usize,
            Classifier::OneVsRest(models) => {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (k, m) in models.iter().enumerate() {
                    let s = m.decision(row);
                    if s > best_score {
                        best = k;
                        best_score = s;
                    }
                }
                best
            }
        }
    }

    pub fn accuracy(&self, x: &FeatureMatrix, labels: &[usize]) -> f64 {
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| self.predict(x.row(*i)) == l)
            .count();
        correct as f64 / labels.len() as f64
    }

    pub fn converged(&self) -> bool {
        match self {
            Classifier::Binary(m) => m.converged,
            Classifier::OneVsRest(ms) => ms.iter().all(|m| m.converged),
        }
    }
}

/// Two classes train one model (class 1 positive); more train one model
/// per class against the rest.
pub fn train_classifier(
    x: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    config: &LogisticConfig,
) -> Result<Classifier, EvalError> {
    if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(EvalError::Shape(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    if n_classes == 2 {
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return Ok(Classifier::Binary(train_logistic(x, &y, config)?));
    }
    let models = (0..n_classes)
        .map(|k| {
            let y: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            train_logistic(x, &y, config)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Classifier::OneVsRest(models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows.iter().map(Vec::as_slice)).unwrap()
    }

    #[test]
    fn separable_one_dimensional() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..10 {
            rows.push(vec![-1.0]);
            y.push(false);
            rows.push(vec![1.0]);
            y.push(true);
        }
        let x = matrix(&rows);
        let model = train_logistic(&x, &y, &LogisticConfig::default()).unwrap();
        assert!(model.converged);
        let clf = Classifier::Binary(model);
        let labels: Vec<usize> = y.iter().map(|&b| b as usize).collect();
        assert_eq!(clf.accuracy(&x, &labels), 1.0);
    }

    #[test]
    fn mirrored_points_force_zero_weight() {
        // Every point appears with its mirror image under the same label.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let label = i % 2 == 0;
            rows.push(p.clone());
            rows.push(p.iter().map(|v| -v).collect());
            y.push(label);
            y.push(label);
        }
        let x = matrix(&rows);
        let cfg = LogisticConfig::default();
        let model = train_logistic(&x, &y, &cfg).unwrap();
        assert!(model.converged);
        let wnorm = dot(&model.weights, &model.weights).sqrt();
        assert!(wnorm <= 10.0 * cfg.tolerance / cfg.regularization_strength, "{wnorm}");
        let labels: Vec<usize> = y.iter().map(|&b| b as usize).collect();
        assert_eq!(Classifier::Binary(model).accuracy(&x, &labels), 0.5);
    }

    #[test]
    fn errors() {
        let x = matrix(&[vec![1.0], vec![2.0]]);
        assert!(matches!(
            train_logistic(&x, &[true, true], &LogisticConfig::default()),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(
            train_logistic(&x, &[true], &LogisticConfig::default()),
            Err(EvalError::Shape(_))
        ));
    }

    #[test]
    fn non_convergence_is_reported_not_fatal() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()])
            .collect();
        let y: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let cfg = LogisticConfig {
            max_iterations: 1,
            ..Default::default()
        };
        let model = train_logistic(&matrix(&rows), &y, &cfg).unwrap();
        assert!(!model.converged);
        assert_eq!(model.iterations, 1);
    }

    #[test]
    fn one_vs_rest_ties_go_to_lowest_class() {
        let zero = LogisticModel {
            weights: vec![0.0],
            bias: 0.0,
            regularization_strength: 1.0,
            converged: true,
            iterations: 0,
            gradient_norm: 0.0,
        };
        let clf = Classifier::OneVsRest(vec![zero.clone(), zero.clone(), zero]);
        assert_eq!(clf.predict(&[5.0]), 0);
    }

    #[test]
    fn three_class_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers = [[0.0, 3.0], [3.0, 0.0], [-3.0, -3.0]];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..150 {
            let k = i % 3;
            rows.push(vec![
                centers[k][0] + rng.random_range(-1.0..1.0),
                centers[k][1] + rng.random_range(-1.0..1.0),
            ]);
            labels.push(k);
        }
        let x = matrix(&rows);
        let clf = train_classifier(&x, &labels, 3, &LogisticConfig::default()).unwrap();
        assert!(clf.accuracy(&x, &labels) > 0.97);
        assert!(clf.converged());
    }

    fn random_instance(seed: u64, n: usize, d: usize) -> (FeatureMatrix, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let params: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.5..1.5)).collect();
        (matrix(&rows), y, params)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn gradient_matches_central_differences(seed in any::<u64>(), n in 2usize..30, d in 1usize..6, strength in 1e-3f64..2.0) {
            let (x, y, params) = random_instance(seed, n, d);
            let mut grad = vec![0.0; d + 1];
            logistic_objective(&x, &y, &params, strength, &mut grad);
            let mut scratch = vec![0.0; d + 1];
            for j in 0..=d {
                let h = 1e-5;
                let mut plus = params.clone();
                plus[j] += h;
                let mut minus = params.clone();
                minus[j] -= h;
                let fd = (logistic_objective(&x, &y, &plus, strength, &mut scratch)
                    - logistic_objective(&x, &y, &minus, strength, &mut scratch)) / (2.0 * h);
                let rel = (fd - grad[j]).abs() / grad[j].abs().max(1e-3);
                prop_assert!(rel <= 1e-4, "component {} analytic {} fd {} rel {}", j, grad[j], fd, rel);
            }
        }

        #[test]
        fn objective_never_increases(seed in any::<u64>(), n in 4usize..60, d in 1usize..8) {
            let (x, y, _) = random_instance(seed, n, d);
            let labels: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let (_, history) = train_logistic_traced(&x, &labels, &LogisticConfig::default()).unwrap();
            for w in history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
