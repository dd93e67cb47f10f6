//! Logistic regression with L1/L2 regularization, written out directly so
//! the objective is explicit and coefficients are interpretable.
//!
//! The fitted objective is
//!
//! ```text
//! (1/N)·Σ logloss(w·z_i + b, y_i)  +  (1/(C·N))·R(w)
//! ```
//!
//! with `z_i` the z-scored feature row, `R = Σ|w_j|` under L1 or `½Σw_j²`
//! under L2, and the bias unregularized. L2 is minimized by full-batch
//! gradient descent, L1 by proximal gradient descent (soft-thresholding);
//! both use backtracking line search and stop when the objective improves by
//! less than 1e-8 or after 5000 iterations. Inputs are standardized with
//! training statistics, so rescaling a raw feature column does not change
//! predictions, and coefficient magnitudes are comparable.

use crate::corpus::Conversation;
use crate::eval::{self, EvalError, ScoredSet};
use crate::text;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// The paper-standard regularization grid.
pub const C_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

const MAX_ITERATIONS: usize = 5000;
const TOLERANCE: f64 = 1e-8;

/// Which penalty `R(w)` the objective carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularization {
    L1,
    L2,
}

impl fmt::Display for Regularization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularization::L1 => "l1",
            Regularization::L2 => "l2",
        })
    }
}

impl FromStr for Regularization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l1" => Ok(Regularization::L1),
            "l2" => Ok(Regularization::L2),
            other => Err(format!("unknown regularization {other:?} (expected l1 or l2)")),
        }
    }
}

/// A fitted logistic-regression model, including the feature standardization
/// captured at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_names: Vec<String>,
    /// Weights on z-scored features; positive weights push toward the
    /// escalated class.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub regularization: Regularization,
    pub c: f64,
}

impl LinearModel {
    /// `sigmoid(w·standardize(x) + b)` per row.
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, LinearError> {
        let d = self.weights.len();
        let mut out = Vec::with_capacity(x.len());
        for (i, row) in x.iter().enumerate() {
            if row.len() != d {
                return Err(LinearError::DimensionMismatch { row: i, expected: d, found: row.len() });
            }
            let mut logit = self.bias;
            for j in 0..d {
                logit += self.weights[j] * (row[j] - self.means[j]) / self.stds[j];
            }
            out.push(sigmoid(logit));
        }
        Ok(out)
    }

    /// Features ranked by absolute weight, largest first, up to `top_k`.
    pub fn coefficients(&self, top_k: usize) -> Vec<(String, f64)> {
        let mut ranked: Vec<(String, f64)> =
            self.feature_names.iter().cloned().zip(self.weights.iter().copied()).collect();
        ranked.sort_by(|a, b| {
            b.1.abs().partial_cmp(&a.1.abs()).expect("weights are finite").then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(top_k);
        ranked
    }
}

/// Overflow-safe logistic function, shared by the linear models and the
/// neural activations.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// The smooth part of the objective on standardized data.
struct Problem<'a> {
    z: Vec<Vec<f64>>,
    y: &'a [bool],
    /// Penalty scale `1/(C·N)`.
    lambda: f64,
}

impl Problem<'_> {
    /// `(1/N)·Σ logloss`, numerically stable.
    fn smooth_loss(&self, w: &[f64], b: f64) -> f64 {
        let mut total = 0.0;
        for (row, &y) in self.z.iter().zip(self.y) {
            let logit = b + dot(w, row);
            total += softplus(logit) - if y { logit } else { 0.0 };
        }
        total / self.y.len() as f64
    }

    /// Gradient of the smooth part with respect to (w, b).
    fn smooth_grad(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.y.len() as f64;
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (row, &y) in self.z.iter().zip(self.y) {
            let residual = sigmoid(b + dot(w, row)) - f64::from(y);
            for (g, v) in gw.iter_mut().zip(row) {
                *g += residual * v;
            }
            gb += residual;
        }
        for g in &mut gw {
            *g /= n;
        }
        (gw, gb / n)
    }

    fn penalty(&self, w: &[f64], reg: Regularization) -> f64 {
        match reg {
            Regularization::L1 => self.lambda * w.iter().map(|v| v.abs()).sum::<f64>(),
            Regularization::L2 => 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    fn objective(&self, w: &[f64], b: f64, reg: Regularization) -> f64 {
        self.smooth_loss(w, b) + self.penalty(w, reg)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Column means and standard deviations; zero-variance columns get std 1
/// (with a warning) so their z-scores are 0 and their weights stay at 0.
fn standardize_stats(x: &[Vec<f64>], names: &[String]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let d = names.len();
    let mut means = vec![0.0; d];
    for row in x {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut stds = vec![0.0; d];
    for row in x {
        for j in 0..d {
            stds[j] += (row[j] - means[j]).powi(2);
        }
    }
    for (j, s) in stds.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            log::debug!("feature {} has zero variance; keeping it with weight 0", names[j]);
            *s = 1.0;
        }
    }
    (means, stds)
}

/// Fit a logistic-regression model.
///
/// `seed` is accepted for interface stability; the solver itself is
/// deterministic (zero initialization, full-batch descent).
pub fn fit(
    x: &[Vec<f64>],
    y: &[bool],
    feature_names: &[String],
    reg: Regularization,
    c: f64,
    seed: u64,
) -> Result<LinearModel, LinearError> {
    let _ = seed;
    if x.len() != y.len() {
        return Err(LinearError::DimensionMismatch { row: 0, expected: y.len(), found: x.len() });
    }
    let d = feature_names.len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(LinearError::DimensionMismatch { row: i, expected: d, found: row.len() });
        }
    }
    let positives = y.iter().filter(|&&l| l).count();
    if positives == 0 || positives == y.len() {
        return Err(LinearError::SingleClass { positives, total: y.len() });
    }
    if !(c > 0.0) {
        return Err(LinearError::BadC { c });
    }

    let (means, stds) = standardize_stats(x, feature_names);
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|row| row.iter().enumerate().map(|(j, v)| (v - means[j]) / stds[j]).collect())
        .collect();
    let problem = Problem { z, y, lambda: 1.0 / (c * y.len() as f64) };

    let (weights, bias) = match reg {
        Regularization::L2 => minimize_l2(&problem, d),
        Regularization::L1 => minimize_l1(&problem, d),
    };
    Ok(LinearModel { feature_names: feature_names.to_vec(), weights, bias, means, stds, regularization: reg, c })
}

/// Gradient descent with backtracking (Armijo) line search.
fn minimize_l2(p: &Problem, d: usize) -> (Vec<f64>, f64) {
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut f = p.objective(&w, b, Regularization::L2);
    let mut eta = 1.0;
    for _ in 0..MAX_ITERATIONS {
        let (mut gw, gb) = p.smooth_grad(&w, b);
        for (g, v) in gw.iter_mut().zip(&w) {
            *g += p.lambda * v;
        }
        let gnorm2 = dot(&gw, &gw) + gb * gb;
        if gnorm2 < 1e-24 {
            break;
        }
        let mut accepted = false;
        while eta > 1e-18 {
            let w_next: Vec<f64> = w.iter().zip(&gw).map(|(v, g)| v - eta * g).collect();
            let b_next = b - eta * gb;
            let f_next = p.objective(&w_next, b_next, Regularization::L2);
            if f_next <= f - 1e-4 * eta * gnorm2 {
                let improvement = f - f_next;
                w = w_next;
                b = b_next;
                f = f_next;
                accepted = true;
                eta = (eta * 1.5).min(1e4);
                if improvement < TOLERANCE {
                    return (w, b);
                }
                break;
            }
            eta /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    (w, b)
}

/// Proximal gradient descent (ISTA): gradient step on the smooth loss, then
/// soft-thresholding, with a backtracking quadratic-upper-bound check.
fn minimize_l1(p: &Problem, d: usize) -> (Vec<f64>, f64) {
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut smooth = p.smooth_loss(&w, b);
    let mut f = smooth + p.penalty(&w, Regularization::L1);
    let mut eta = 1.0;
    for _ in 0..MAX_ITERATIONS {
        let (gw, gb) = p.smooth_grad(&w, b);
        let mut accepted = false;
        while eta > 1e-18 {
            let w_next: Vec<f64> = w
                .iter()
                .zip(&gw)
                .map(|(v, g)| soft_threshold(v - eta * g, eta * p.lambda))
                .collect();
            let b_next = b - eta * gb;
            let smooth_next = p.smooth_loss(&w_next, b_next);
            // Upper-bound condition: g(x⁺) ≤ g(x) + ∇g·Δ + ‖Δ‖²/(2η).
            let mut linear = (b_next - b) * gb;
            let mut quad = (b_next - b).powi(2);
            for j in 0..d {
                let delta = w_next[j] - w[j];
                linear += delta * gw[j];
                quad += delta * delta;
            }
            if smooth_next <= smooth + linear + quad / (2.0 * eta) + 1e-15 {
                let f_next = smooth_next + p.penalty(&w_next, Regularization::L1);
                let improvement = f - f_next;
                w = w_next;
                b = b_next;
                smooth = smooth_next;
                f = f_next;
                accepted = true;
                eta = (eta * 1.5).min(1e4);
                if improvement < TOLERANCE {
                    return (w, b);
                }
                break;
            }
            eta /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    (w, b)
}

/// One candidate's validation score in a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub regularization: Regularization,
    pub c: f64,
    pub val_pr_auc: f64,
}

/// Train every (regularization, C) candidate and keep the one maximizing
/// validation PR-AUC; ties go to smaller C, then L2.
pub fn grid_search(
    x_train: &[Vec<f64>],
    y_train: &[bool],
    x_val: &[Vec<f64>],
    y_val: &[bool],
    feature_names: &[String],
    cs: &[f64],
    seed: u64,
) -> Result<(LinearModel, Vec<GridEntry>), LinearError> {
    let mut best: Option<(f64, LinearModel)> = None;
    let mut table = Vec::with_capacity(cs.len() * 2);
    // Candidates ordered so that on ties the first maximum wins: smaller C
    // first, L2 before L1.
    for &c in cs {
        for reg in [Regularization::L2, Regularization::L1] {
            let model = fit(x_train, y_train, feature_names, reg, c, seed)?;
            let scores = model.predict_proba(x_val)?;
            let ids = (0..x_val.len()).map(|i| format!("val{i}")).collect();
            let set = ScoredSet::new(ids, y_val.to_vec(), scores)?;
            let auc = eval::pr_auc(&set)?;
            table.push(GridEntry { regularization: reg, c, val_pr_auc: auc });
            if best.as_ref().is_none_or(|(best_auc, _)| auc > *best_auc) {
                best = Some((auc, model));
            }
        }
    }
    Ok((best.expect("at least one candidate").1, table))
}

/// The `vocab_size` most frequent tokens over the conversations, ranked by
/// total count (descending) then alphabetically. Stopwords are retained.
pub fn bag_of_words_vocabulary(cs: &[Conversation], vocab_size: usize) -> Vec<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in cs {
        for u in &c.utterances {
            for token in text::tokenize(&u.text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(vocab_size);
    ranked.into_iter().map(|(t, _)| t).collect()
}

/// Sublinear token counts per conversation under a fixed vocabulary:
/// `1 + ln(count)` for counts ≥ 1, else 0.
pub fn bag_of_words_matrix(cs: &[Conversation], vocab: &[String]) -> Vec<Vec<f64>> {
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    cs.iter()
        .map(|c| {
            let mut counts = vec![0usize; vocab.len()];
            for u in &c.utterances {
                for token in text::tokenize(&u.text) {
                    if let Some(&j) = index.get(token.as_str()) {
                        counts[j] += 1;
                    }
                }
            }
            counts
                .into_iter()
                .map(|n| if n == 0 { 0.0 } else { 1.0 + (n as f64).ln() })
                .collect()
        })
        .collect()
}

/// On-disk model format (versioned JSON).
#[derive(Debug, Serialize, Deserialize)]
struct LinearModelFile {
    format: String,
    version: u32,
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    model: LinearModel,
}

const LINEAR_FORMAT: &str = "disputelab-linear";
const LINEAR_VERSION: u32 = 1;

/// Serialize a model with its provenance (config hash and seed).
pub fn save_model(
    path: impl AsRef<Path>,
    model: &LinearModel,
    config_hash: &str,
    seed: u64,
) -> Result<(), LinearError> {
    let file = LinearModelFile {
        format: LINEAR_FORMAT.to_string(),
        version: LINEAR_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        model: model.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| LinearError::Format(e.to_string()))?;
    crate::ioutil::write_atomic(path, json.as_bytes())?;
    Ok(())
}

/// Load a model saved by [`save_model`], returning `(model, config_hash,
/// seed)`.
pub fn load_model(path: impl AsRef<Path>) -> Result<(LinearModel, String, u64), LinearError> {
    let content = std::fs::read_to_string(path)?;
    let file: LinearModelFile =
        serde_json::from_str(&content).map_err(|e| LinearError::Format(e.to_string()))?;
    if file.format != LINEAR_FORMAT || file.version != LINEAR_VERSION {
        return Err(LinearError::Format(format!(
            "expected {LINEAR_FORMAT} v{LINEAR_VERSION}, found {} v{}",
            file.format, file.version
        )));
    }
    Ok((file.model, file.config_hash, file.seed))
}

/// Errors from model fitting, prediction, and serialization.
#[derive(Debug, Error)]
pub enum LinearError {
    #[error("row {row}: expected {expected} columns, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("training labels are single-class: {positives} positives of {total}")]
    SingleClass { positives: usize, total: usize },
    #[error("C must be positive, got {c}")]
    BadC { c: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad model file: {0}")]
    Format(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Utterance, UtteranceKind};
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f{j}")).collect()
    }

    #[test]
    fn separable_data_fits_positive_weight() {
        let x = vec![vec![-1.0], vec![-1.0], vec![1.0], vec![1.0]];
        let y = vec![false, false, true, true];
        let m = fit(&x, &y, &names(1), Regularization::L2, 1.0, 0).unwrap();
        assert!(m.weights[0] > 0.0);
        let p = m.predict_proba(&x).unwrap();
        assert!(p[0] < 0.5 && p[1] < 0.5 && p[2] > 0.5 && p[3] > 0.5, "{p:?}");
    }

    #[test]
    fn zero_variance_feature_keeps_zero_weight() {
        let x = vec![vec![-1.0, 3.0], vec![-1.0, 3.0], vec![1.0, 3.0], vec![1.0, 3.0]];
        let y = vec![false, false, true, true];
        for reg in [Regularization::L1, Regularization::L2] {
            let m = fit(&x, &y, &names(2), reg, 1.0, 0).unwrap();
            assert_eq!(m.weights[1], 0.0);
            assert_eq!(m.stds[1], 1.0);
        }
    }

    #[test]
    fn fit_rejects_single_class_and_bad_c() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            fit(&x, &[true, true], &names(1), Regularization::L2, 1.0, 0).unwrap_err(),
            LinearError::SingleClass { .. }
        ));
        assert!(matches!(
            fit(&x, &[true, false], &names(1), Regularization::L2, 0.0, 0).unwrap_err(),
            LinearError::BadC { .. }
        ));
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = LinearModel {
            feature_names: names(2),
            weights: vec![0.0, 0.0],
            bias: 0.0,
            means: vec![0.0, 0.0],
            stds: vec![1.0, 1.0],
            regularization: Regularization::L2,
            c: 1.0,
        };
        let p = m.predict_proba(&[vec![3.0, -4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn large_bias_saturates() {
        let m = LinearModel {
            feature_names: names(1),
            weights: vec![0.0],
            bias: 10.0,
            means: vec![0.0],
            stds: vec![1.0],
            regularization: Regularization::L2,
            c: 1.0,
        };
        let p = m.predict_proba(&[vec![0.0]]).unwrap();
        assert!(p[0] > 0.9999);
    }

    #[test]
    fn duplicated_row_duplicates_output() {
        let x = vec![vec![-1.0, 0.5], vec![1.0, -0.5], vec![0.3, 0.9], vec![-0.7, 0.1]];
        let y = vec![false, true, true, false];
        let m = fit(&x, &y, &names(2), Regularization::L2, 10.0, 0).unwrap();
        let p = m.predict_proba(&[vec![0.3, 0.9], vec![0.3, 0.9]]).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn predict_rejects_dimension_mismatch() {
        let x = vec![vec![-1.0], vec![1.0]];
        let m = fit(&x, &[false, true], &names(1), Regularization::L2, 1.0, 0).unwrap();
        assert!(matches!(
            m.predict_proba(&[vec![1.0, 2.0]]).unwrap_err(),
            LinearError::DimensionMismatch { .. }
        ));
    }

    fn random_dataset(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = rng::seeded(seed);
        let w_true: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let x: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect();
        let y: Vec<bool> = x
            .iter()
            .map(|row| {
                let z = dot(&w_true, row) + (rng.random::<f64>() - 0.5);
                z > 0.0
            })
            .collect();
        (x, y)
    }

    /// Analytic gradients against central finite differences.
    #[test]
    fn smooth_gradient_matches_finite_differences() {
        let (x, y) = random_dataset(40, 3, 7);
        let names = names(3);
        let (means, stds) = standardize_stats(&x, &names);
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|row| row.iter().enumerate().map(|(j, v)| (v - means[j]) / stds[j]).collect())
            .collect();
        let p = Problem { z, y: &y, lambda: 1.0 / (1.0 * y.len() as f64) };

        let mut rng = rng::seeded(11);
        for _ in 0..5 {
            let w: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let b: f64 = rng.random::<f64>() - 0.5;
            // Full L2 objective gradient.
            let (mut gw, gb) = p.smooth_grad(&w, b);
            for (g, v) in gw.iter_mut().zip(&w) {
                *g += p.lambda * v;
            }
            let h = 1e-6;
            for j in 0..3 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let numeric = (p.objective(&wp, b, Regularization::L2)
                    - p.objective(&wm, b, Regularization::L2))
                    / (2.0 * h);
                assert_relative_eq!(gw[j], numeric, max_relative = 1e-5, epsilon = 1e-9);
            }
            let numeric_b = (p.objective(&w, b + h, Regularization::L2)
                - p.objective(&w, b - h, Regularization::L2))
                / (2.0 * h);
            assert_relative_eq!(gb, numeric_b, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn l1_shrinkage_is_monotone_over_grid() {
        for seed in [1, 2] {
            let (x, y) = random_dataset(80, 4, seed);
            let mut previous = -1.0;
            for c in C_GRID {
                let m = fit(&x, &y, &names(4), Regularization::L1, c, 0).unwrap();
                let norm: f64 = m.weights.iter().map(|w| w.abs()).sum();
                assert!(
                    norm >= previous - 1e-6,
                    "seed {seed}: |w|₁ {norm} < {previous} at C={c}"
                );
                previous = norm;
            }
        }
    }

    #[test]
    fn rescaling_a_column_leaves_predictions_unchanged() {
        let (x, y) = random_dataset(60, 3, 5);
        let m = fit(&x, &y, &names(3), Regularization::L2, 1.0, 0).unwrap();
        let mut scaled: Vec<Vec<f64>> = x.clone();
        for row in &mut scaled {
            row[1] *= 250.0;
        }
        let m2 = fit(&scaled, &y, &names(3), Regularization::L2, 1.0, 0).unwrap();
        let p1 = m.predict_proba(&x).unwrap();
        let p2 = m2.predict_proba(&scaled).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn grid_search_scores_eight_candidates_and_breaks_ties() {
        let (x, y) = random_dataset(80, 3, 9);
        let (xv, yv) = random_dataset(40, 3, 10);
        let (best, table) =
            grid_search(&x, &y, &xv, &yv, &names(3), &C_GRID, 0).unwrap();
        assert_eq!(table.len(), 8);
        let best_auc = table.iter().map(|e| e.val_pr_auc).fold(f64::MIN, f64::max);
        // The returned model is the first candidate achieving the maximum in
        // (C ascending, L2-then-L1) order.
        let first = table
            .iter()
            .find(|e| e.val_pr_auc == best_auc)
            .expect("table has a maximum");
        assert_eq!(best.regularization, first.regularization);
        assert_relative_eq!(best.c, first.c);

        let (again, _) = grid_search(&x, &y, &xv, &yv, &names(3), &C_GRID, 0).unwrap();
        assert_eq!(best, again);
    }

    #[test]
    fn coefficients_rank_by_magnitude() {
        let m = LinearModel {
            feature_names: vec!["f1".into(), "f2".into()],
            weights: vec![3.0, -5.0],
            bias: 0.0,
            means: vec![0.0; 2],
            stds: vec![1.0; 2],
            regularization: Regularization::L2,
            c: 1.0,
        };
        let ranked = m.coefficients(10);
        assert_eq!(ranked, vec![("f2".to_string(), -5.0), ("f1".to_string(), 3.0)]);
        assert_eq!(m.coefficients(1).len(), 1);
    }

    fn word_conv(id: &str, text_lines: &[&str]) -> Conversation {
        let utterances = text_lines
            .iter()
            .enumerate()
            .map(|(i, t)| Utterance {
                id: format!("{id}-u{i}"),
                author: if i % 2 == 0 { "A" } else { "B" }.to_string(),
                timestamp: i as i64,
                text: t.to_string(),
                kind: UtteranceKind::TalkPost,
                toxicity: None,
                severe_toxicity: None,
            })
            .collect();
        Conversation::new(id, "Talk:P", utterances, Some(Label::Escalated)).unwrap()
    }

    #[test]
    fn bag_of_words_vocabulary_and_scaling() {
        let cs = vec![
            word_conv("c1", &["alpha alpha beta", "gamma alpha"]),
            word_conv("c2", &["beta beta gamma"]),
        ];
        // Counts: alpha 3, beta 3, gamma 2 → ties alphabetical.
        let vocab = bag_of_words_vocabulary(&cs, 2);
        assert_eq!(vocab, vec!["alpha".to_string(), "beta".to_string()]);

        let matrix = bag_of_words_matrix(&cs, &vocab);
        assert_relative_eq!(matrix[0][0], 1.0 + 3.0f64.ln()); // alpha ×3
        assert_relative_eq!(matrix[0][1], 1.0); // beta ×1 → 1+ln(1)
        assert_relative_eq!(matrix[1][0], 0.0); // alpha absent
        assert_relative_eq!(matrix[1][1], 1.0 + 2.0f64.ln()); // beta ×2
    }

    #[test]
    fn model_file_roundtrip_and_version_check() {
        let (x, y) = random_dataset(30, 2, 3);
        let m = fit(&x, &y, &names(2), Regularization::L1, 10.0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &m, "deadbeef", 4).unwrap();
        let (loaded, hash, seed) = load_model(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(hash, "deadbeef");
        assert_eq!(seed, 4);

        std::fs::write(&path, "{\"format\":\"other\",\"version\":9}").unwrap();
        assert!(matches!(load_model(&path).unwrap_err(), LinearError::Format(_)));
    }
}
