//! Soft-margin SVM trained with sequential minimal optimization, used to
//! push criteria-unknown trajectories into one of the two definite classes.
//!
//! The solver is the standard maximal-violating-pair SMO; it needs no
//! randomness, so training is deterministic given the train/test split.

use super::{
    LabelSource, LabeledFeatures, SubClassError, SubClassFeatures, SubClassLabel, SubClassResult,
    FEATURE_DIM,
};
use crate::linalg::Mat;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SvmKernel {
    Rbf { gamma: f64 },
    Linear,
}

impl SvmKernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            SvmKernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
            SvmKernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// None picks 1 / (dim * mean standardized feature variance).
    pub gamma: Option<f64>,
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub split_ratio: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            gamma: None,
            c: 1.0,
            tol: 1e-3,
            max_iter: 100_000,
            split_ratio: 0.8,
            folds: 5,
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<(), SubClassError> {
        let ok = self.c > 0.0
            && self.tol > 0.0
            && self.max_iter > 0
            && self.split_ratio > 0.0
            && self.split_ratio < 1.0
            && self.folds >= 2
            && self.gamma.map_or(true, |g| g > 0.0);
        if ok {
            Ok(())
        } else {
            Err(SubClassError::InsufficientSamples { needed: 0, got: 0 })
        }
    }
}

/// Decision function: sum over support vectors of coeff * K(sv, z) + bias,
/// in standardized feature space. Positive means normal pedestrian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: SvmKernel,
    pub c: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub support_vectors: Mat,
    /// alpha_i * y_i per support vector.
    pub coeffs: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub cv_accuracies: Vec<f64>,
    pub cv_mean_accuracy: f64,
    pub held_out_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn label_to_y(label: SubClassLabel) -> Option<f64> {
    match label {
        SubClassLabel::Normal => Some(1.0),
        SubClassLabel::Wheelchair => Some(-1.0),
        SubClassLabel::Unknown => None,
    }
}

/// Stratified shuffle split, then k-fold cross-validation on the training
/// side, then a final model on the full training side scored against the
/// held-out remainder. Unknown-labeled rows are ignored with a warning.
pub fn train_svm(
    features: &[SubClassFeatures],
    labels: &[SubClassLabel],
    config: &SvmConfig,
) -> Result<(SvmModel, AccuracyReport), SubClassError> {
    assert_eq!(features.len(), labels.len(), "features/labels length mismatch");
    config.validate()?;

    let mut xs: Vec<[f64; FEATURE_DIM]> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut skipped = 0usize;
    for (f, &l) in features.iter().zip(labels) {
        match label_to_y(l) {
            Some(y) => {
                xs.push(f.as_array());
                ys.push(y);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("train_svm: ignoring {skipped} unknown-labeled rows");
    }

    let pos: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] > 0.0).collect();
    let neg: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] < 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(SubClassError::SingleClassTrainingSet);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in [&pos, &neg] {
        let mut shuffled = class.clone();
        shuffled.shuffle(&mut rng);
        let n_c = shuffled.len();
        let cut = if n_c < 2 {
            n_c
        } else {
            ((config.split_ratio * n_c as f64).round() as usize).clamp(1, n_c - 1)
        };
        train_idx.extend_from_slice(&shuffled[..cut]);
        test_idx.extend_from_slice(&shuffled[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    // Stratified folds: round-robin over each class's shuffled train members.
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); config.folds];
    for class_sign in [1.0, -1.0] {
        let mut members: Vec<usize> = train_idx
            .iter()
            .copied()
            .filter(|&i| ys[i] == class_sign)
            .collect();
        members.shuffle(&mut rng);
        for (k, i) in members.into_iter().enumerate() {
            folds[k % config.folds].push(i);
        }
    }

    let mut cv_accuracies = Vec::new();
    for held in 0..config.folds {
        if folds[held].is_empty() {
            continue;
        }
        let fit_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != held)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let model = fit_model(&xs, &ys, &fit_idx, config)?;
        let correct = folds[held]
            .iter()
            .filter(|&&i| model.decision_raw(&xs[i]) * ys[i] > 0.0)
            .count();
        cv_accuracies.push(correct as f64 / folds[held].len() as f64);
    }
    let cv_mean_accuracy = if cv_accuracies.is_empty() {
        0.0
    } else {
        cv_accuracies.iter().sum::<f64>() / cv_accuracies.len() as f64
    };

    let model = fit_model(&xs, &ys, &train_idx, config)?;
    let held_out_accuracy = if test_idx.is_empty() {
        0.0
    } else {
        let correct = test_idx
            .iter()
            .filter(|&&i| model.decision_raw(&xs[i]) * ys[i] > 0.0)
            .count();
        correct as f64 / test_idx.len() as f64
    };

    let report = AccuracyReport {
        cv_accuracies,
        cv_mean_accuracy,
        held_out_accuracy,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
    };
    Ok((model, report))
}

/// Standardize the subset, resolve gamma, run SMO, keep support vectors.
fn fit_model(
    xs: &[[f64; FEATURE_DIM]],
    ys: &[f64],
    idx: &[usize],
    config: &SvmConfig,
) -> Result<SvmModel, SubClassError> {
    let n = idx.len();
    if n == 0 || !idx.iter().any(|&i| ys[i] > 0.0) || !idx.iter().any(|&i| ys[i] < 0.0) {
        return Err(SubClassError::SingleClassTrainingSet);
    }

    let mut means = vec![0.0; FEATURE_DIM];
    for &i in idx {
        for (m, v) in means.iter_mut().zip(&xs[i]) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; FEATURE_DIM];
    for &i in idx {
        for (s, (v, m)) in vars.iter_mut().zip(xs[i].iter().zip(&means)) {
            *s += (v - m).powi(2);
        }
    }
    let stds: Vec<f64> = vars
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();

    let mut z = Mat::zeros(n, FEATURE_DIM);
    for (r, &i) in idx.iter().enumerate() {
        for j in 0..FEATURE_DIM {
            z[(r, j)] = (xs[i][j] - means[j]) / stds[j];
        }
    }
    let y: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();

    let gamma = config.gamma.unwrap_or_else(|| {
        let mean_var = (0..FEATURE_DIM)
            .map(|j| {
                let m: f64 = (0..n).map(|r| z[(r, j)]).sum::<f64>() / n as f64;
                (0..n).map(|r| (z[(r, j)] - m).powi(2)).sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / FEATURE_DIM as f64;
        if mean_var > 1e-12 {
            1.0 / (FEATURE_DIM as f64 * mean_var)
        } else {
            1.0 / FEATURE_DIM as f64
        }
    });
    let kernel = SvmKernel::Rbf { gamma };

    let (alphas, bias) = smo_solve(&z, &y, &kernel, config.c, config.tol, config.max_iter);

    const SV_EPS: f64 = 1e-8;
    let sv_rows: Vec<usize> = (0..n).filter(|&r| alphas[r] > SV_EPS).collect();
    let mut support_vectors = Mat::zeros(sv_rows.len(), FEATURE_DIM);
    let mut coeffs = Vec::with_capacity(sv_rows.len());
    for (out, &r) in sv_rows.iter().enumerate() {
        for j in 0..FEATURE_DIM {
            support_vectors[(out, j)] = z[(r, j)];
        }
        coeffs.push(alphas[r] * y[r]);
    }

    Ok(SvmModel {
        kernel,
        c: config.c,
        means,
        stds,
        support_vectors,
        coeffs,
        bias,
    })
}

/// Maximal-violating-pair SMO on the dual problem. Returns (alphas, bias).
fn smo_solve(
    z: &Mat,
    y: &[f64],
    kernel: &SvmKernel,
    c: f64,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = z.rows();
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(z.row(i), z.row(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }

    let mut alpha = vec![0.0f64; n];
    // Gradient of 1/2 a'Qa - e'a with Q_ij = y_i y_j K_ij; starts at -e.
    let mut grad = vec![-1.0f64; n];

    for _ in 0..max_iter {
        // I_up / I_low extremes; ties resolved toward the lowest index.
        let mut i_sel = None;
        let mut m_up = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut m_low = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if in_up && v > m_up {
                m_up = v;
                i_sel = Some(t);
            }
            if in_low && v < m_low {
                m_low = v;
                j_sel = Some(t);
            }
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else { break };
        if m_up - m_low <= tol {
            break;
        }

        let quad = (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(1e-12);
        let old_ai = alpha[i];
        let old_aj = alpha[j];
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else {
                if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
        }

        let d_ai = alpha[i] - old_ai;
        let d_aj = alpha[j] - old_aj;
        if d_ai == 0.0 && d_aj == 0.0 {
            break;
        }
        for t in 0..n {
            grad[t] += y[t] * y[i] * k[(t, i)] * d_ai + y[t] * y[j] * k[(t, j)] * d_aj;
        }
    }

    // rho per KKT: average y*G over free vectors, else midpoint of bounds.
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum_free = 0.0;
    let mut n_free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    (alpha, -rho)
}

impl SvmModel {
    pub fn is_trained(&self) -> bool {
        self.support_vectors.rows() > 0
    }

    fn decision_raw(&self, x: &[f64; FEATURE_DIM]) -> f64 {
        let z: Vec<f64> = (0..FEATURE_DIM)
            .map(|j| (x[j] - self.means[j]) / self.stds[j])
            .collect();
        let mut f = self.bias;
        for (r, coeff) in self.coeffs.iter().enumerate() {
            f += coeff * self.kernel.eval(self.support_vectors.row(r), &z);
        }
        f
    }

    /// Signed distance-like decision value; positive means normal.
    pub fn decision(&self, features: &SubClassFeatures) -> Result<f64, SubClassError> {
        if !self.is_trained() {
            return Err(SubClassError::UntrainedModel);
        }
        Ok(self.decision_raw(&features.as_array()))
    }

    /// Label plus a margin-derived confidence in [0, 1).
    pub fn predict(&self, features: &SubClassFeatures) -> Result<SubClassResult, SubClassError> {
        let f = self.decision(features)?;
        let label = if f >= 0.0 {
            SubClassLabel::Normal
        } else {
            SubClassLabel::Wheelchair
        };
        Ok(SubClassResult {
            label,
            source: LabelSource::Svm,
            confidence: f.abs() / (1.0 + f.abs()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SubClassError> {
        let json = serde_json::to_string_pretty(self).expect("SvmModel serializes");
        std::fs::write(path, json).map_err(|source| SubClassError::Io {
            action: "write",
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SubClassError> {
        let text = std::fs::read_to_string(path).map_err(|source| SubClassError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SubClassError::BadModel {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Replace every unknown row's result with the SVM's prediction. Returns
/// how many rows were relabeled.
pub fn relabel_unknowns(
    model: &SvmModel,
    rows: &mut [LabeledFeatures],
) -> Result<usize, SubClassError> {
    if !model.is_trained() {
        return Err(SubClassError::UntrainedModel);
    }
    let mut relabeled = 0;
    for row in rows.iter_mut() {
        if row.result.label == SubClassLabel::Unknown {
            row.result = model.predict(&row.features)?;
            relabeled += 1;
        }
    }
    Ok(relabeled)
}
