//! Two-component PCA over the six sub-class features, used to check that
//! the criteria-labeled classes actually separate before training an SVM.
//!
//! The eigensolver is a cyclic Jacobi sweep; at 6x6 it converges in a
//! handful of sweeps and keeps the build free of a linear-algebra crate.

use super::{SubClassError, SubClassFeatures, FEATURE_DIM, FEATURE_NAMES};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fitted projection onto the top two principal components of the
/// standardized features. Constant features are dropped at fit time;
/// `kept` maps component columns back to feature indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Indices into the original feature vector, one per retained column.
    pub kept: Vec<usize>,
    /// 2 x kept.len(), rows orthonormal.
    pub components: Mat,
    /// Fraction of total variance captured by each of the two components.
    pub explained: [f64; 2],
}

const STD_EPS: f64 = 1e-12;

/// Standardize, drop constant features (with a warning), eigendecompose the
/// sample covariance, and keep the two leading components.
pub fn fit_pca(features: &[SubClassFeatures]) -> Result<PcaModel, SubClassError> {
    let n = features.len();
    if n < 3 {
        return Err(SubClassError::InsufficientSamples { needed: 3, got: n });
    }
    let rows: Vec<[f64; FEATURE_DIM]> = features.iter().map(|f| f.as_array()).collect();

    let mut means = vec![0.0; FEATURE_DIM];
    for row in &rows {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut stds = vec![0.0; FEATURE_DIM];
    for row in &rows {
        for (s, (v, m)) in stds.iter_mut().zip(row.iter().zip(&means)) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut stds {
        *s = (*s / (n - 1) as f64).sqrt();
    }

    let kept: Vec<usize> = (0..FEATURE_DIM).filter(|&j| stds[j] > STD_EPS).collect();
    for j in 0..FEATURE_DIM {
        if stds[j] <= STD_EPS {
            log::warn!("dropping constant feature {} from PCA", FEATURE_NAMES[j]);
        }
    }
    let k = kept.len();
    if k == 0 {
        return Err(SubClassError::AllFeaturesConstant);
    }

    // Standardized data matrix restricted to the kept columns.
    let mut z = Mat::zeros(n, k);
    for (i, row) in rows.iter().enumerate() {
        for (c, &j) in kept.iter().enumerate() {
            z[(i, c)] = (row[j] - means[j]) / stds[j];
        }
    }
    // Sample covariance of standardized data: Z^T Z / (n - 1).
    let mut cov = z.tmatmul(&z);
    cov.scale_in_place(1.0 / (n - 1) as f64);

    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let n_components = 2.min(k);
    let mut components = Mat::zeros(2, k);
    let mut explained = [0.0; 2];
    for c in 0..n_components {
        let col = order[c];
        // Deterministic sign: largest-magnitude entry positive.
        let mut pivot = 0;
        for r in 1..k {
            if eigenvectors[(r, col)].abs() > eigenvectors[(pivot, col)].abs() {
                pivot = r;
            }
        }
        let sign = if eigenvectors[(pivot, col)] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..k {
            components[(c, r)] = sign * eigenvectors[(r, col)];
        }
        explained[c] = if total > 0.0 {
            eigenvalues[col].max(0.0) / total
        } else {
            0.0
        };
    }

    Ok(PcaModel {
        means,
        stds,
        kept,
        components,
        explained,
    })
}

impl PcaModel {
    /// Project one feature vector onto (PC1, PC2). With a single retained
    /// feature PC2 is identically zero.
    pub fn project(&self, features: &SubClassFeatures) -> (f64, f64) {
        let row = features.as_array();
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            for (col, &j) in self.kept.iter().enumerate() {
                let z = (row[j] - self.means[j]) / self.stds[j];
                *o += self.components[(c, col)] * z;
            }
        }
        (out[0], out[1])
    }

    pub fn save(&self, path: &Path) -> Result<(), SubClassError> {
        let json = serde_json::to_string_pretty(self).expect("PcaModel serializes");
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

/// Separation of two groups along PC1: |mean gap| / pooled standard
/// deviation. Groups are selected by `in_a`; returns None when either group
/// has fewer than two members.
pub fn pc1_separation<F>(
    model: &PcaModel,
    features: &[SubClassFeatures],
    in_a: F,
) -> Option<f64>
where
    F: Fn(usize) -> bool,
{
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let (pc1, _) = model.project(f);
        if in_a(i) {
            a.push(pc1);
        } else {
            b.push(pc1);
        }
    }
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var, n)
    };
    let (ma, va, na) = stats(&a);
    let (mb, vb, nb) = stats(&b);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if pooled <= 0.0 {
        return Some(f64::INFINITY);
    }
    Some((ma - mb).abs() / pooled)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(sym: &Mat) -> (Vec<f64>, Mat) {
    let k = sym.rows();
    assert_eq!(k, sym.cols(), "jacobi_eigen needs a square matrix");
    let mut a = sym.clone();
    let mut v = Mat::identity(k);
    const MAX_SWEEPS: usize = 100;
    const OFF_EPS: f64 = 1e-14;

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < OFF_EPS {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = a[(p, q)];
                if apq.abs() < OFF_EPS / (k as f64) {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..k {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for i in 0..k {
                    let api = a[(p, i)];
                    let aqi = a[(q, i)];
                    a[(p, i)] = c * api - s * aqi;
                    a[(q, i)] = s * api + c * aqi;
                }
                for i in 0..k {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues = (0..k).map(|i| a[(i, i)]).collect();
    (eigenvalues, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_eigenpairs() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let mut m = Mat::zeros(2, 2);
        m[(0, 0)] = 2.0;
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 1.0;
        m[(1, 1)] = 2.0;
        let (mut vals, vecs) = jacobi_eigen(&m);
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // Columns orthonormal.
        for c in 0..2 {
            let norm: f64 = (0..2).map(|r| vecs[(r, c)] * vecs[(r, c)]).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let dot: f64 = (0..2).map(|r| vecs[(r, 0)] * vecs[(r, 1)]).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn jacobi_diagonalizes_random_symmetric() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = 6;
        let mut m = Mat::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let v = rng.random_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let (vals, vecs) = jacobi_eigen(&m);
        // M v_i = lambda_i v_i for every eigenpair.
        for c in 0..k {
            for r in 0..k {
                let mv: f64 = (0..k).map(|j| m[(r, j)] * vecs[(j, c)]).sum();
                assert!(
                    (mv - vals[c] * vecs[(r, c)]).abs() < 1e-9,
                    "eigenpair {c} residual too large at row {r}"
                );
            }
        }
    }
}
