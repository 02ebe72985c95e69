//! Principal component analysis on a centred covariance, keeping the
//! smallest number of components whose cumulative explained variance
//! reaches a threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_tn, symmetric_eig, Matrix};

/// Slack on the cumulative-ratio comparison so that a threshold of exactly
/// 1.0 selects the covariance rank instead of tripping over rounding.
const RATIO_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// Per-dimension training mean.
    pub mean: Vec<f64>,
    /// `dim × k`, columns are the retained eigenvectors.
    pub basis: Matrix,
    /// Full covariance spectrum, descending.
    pub eigenvalues: Vec<f64>,
    pub k: usize,
    pub threshold: f64,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Explained-variance ratio of every component (negative rounding noise
    /// in the spectrum counts as zero).
    pub fn explained_ratios(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|l| l.max(0.0)).sum();
        if total == 0.0 {
            return vec![0.0; self.eigenvalues.len()];
        }
        self.eigenvalues.iter().map(|l| l.max(0.0) / total).collect()
    }

    pub fn retained_ratio(&self) -> f64 {
        self.explained_ratios()[..self.k].iter().sum()
    }

    /// Checks the structural invariants, used when a model is loaded.
    pub fn validate(&self) -> Result<()> {
        let dim = self.mean.len();
        if self.basis.rows() != dim || self.basis.cols() != self.k {
            return Err(Error::DimChain(format!(
                "PCA basis is {}x{} for mean of {} and k = {}",
                self.basis.rows(),
                self.basis.cols(),
                dim,
                self.k
            )));
        }
        if self.k == 0 || self.k > dim || self.eigenvalues.len() != dim {
            return Err(Error::DimChain(format!(
                "PCA keeps {} of {} components with {} eigenvalues",
                self.k,
                dim,
                self.eigenvalues.len()
            )));
        }
        Ok(())
    }
}

pub fn pca_fit(x: &Matrix, threshold: f64) -> Result<PcaModel> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance threshold {threshold} outside (0, 1]"
        )));
    }
    let (n, dim) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 samples, got {n}"
        )));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("PCA on zero-width features".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("PCA input".into()));
    }

    let mut mean = vec![0.0; dim];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = center(x, &mean);
    let mut cov = matmul_tn(&centered, &centered)?;
    cov.data_mut().iter_mut().for_each(|c| *c /= n as f64);
    // Exact symmetry; the accumulation order can differ across the diagonal.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    let eig = symmetric_eig(&cov)?;
    let total: f64 = eig.values.iter().map(|l| l.max(0.0)).sum();
    let k = if total == 0.0 {
        1
    } else {
        let mut cumulative = 0.0;
        let mut k = dim;
        for (i, l) in eig.values.iter().enumerate() {
            cumulative += l.max(0.0) / total;
            if cumulative >= threshold - RATIO_SLACK {
                k = i + 1;
                break;
            }
        }
        k
    };

    let mut basis = Matrix::zeros(dim, k);
    for r in 0..dim {
        for c in 0..k {
            basis.set(r, c, eig.vectors.get(r, c));
        }
    }
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues: eig.values,
        k,
        threshold,
    })
}

fn center(x: &Matrix, mean: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(mean) {
            *v -= m;
        }
    }
    out
}

/// `(x − mean) · basis`.
pub fn pca_transform(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    if x.cols() != model.input_dim() {
        return Err(Error::shapes(
            "pca_transform",
            x.shape(),
            (model.input_dim(), model.k),
        ));
    }
    matmul(&center(x, &model.mean), &model.basis)
}

/// `z · basisᵀ + mean`; exact inverse only when all components are kept.
pub fn pca_inverse(model: &PcaModel, z: &Matrix) -> Result<Matrix> {
    if z.cols() != model.k {
        return Err(Error::shapes("pca_inverse", z.shape(), (model.k, model.input_dim())));
    }
    let mut out = matmul(z, &model.basis.transpose())?;
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(&model.mean) {
            *v += m;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Eight zero-mean rows whose population covariance is exactly
    /// `diag(variances)`: ±√(4λ) along each axis.
    fn diagonal_covariance_rows(variances: &[f64]) -> Matrix {
        let d = variances.len();
        let mut rows = Vec::new();
        for (i, &l) in variances.iter().enumerate() {
            let a = (l * (2 * d) as f64 / 2.0).sqrt();
            for sign in [1.0, -1.0] {
                let mut r = vec![0.0; d];
                r[i] = sign * a;
                rows.push(r);
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn collinear_points_keep_one_axis() {
        let x = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
            vec![-1.0, -1.0],
        ])
        .unwrap();
        let m = pca_fit(&x, 0.95).unwrap();
        assert_eq!(m.k, 1);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.basis.get(0, 0).abs() - h).abs() < 1e-12);
        assert!((m.basis.get(1, 0).abs() - h).abs() < 1e-12);
        assert!((m.retained_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_spectrum_selects_two_components() {
        let x = diagonal_covariance_rows(&[0.90, 0.06, 0.03, 0.01]);
        let m = pca_fit(&x, 0.95).unwrap();
        assert_eq!(m.k, 2);
        let r = m.explained_ratios();
        assert!((r[0] + r[1] - 0.96).abs() < 1e-12);
    }

    #[test]
    fn full_threshold_keeps_rank() {
        // Rank-2 data embedded in 3 dimensions.
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![-1.0, 0.0, -1.0],
            vec![0.0, -1.0, -1.0],
            vec![2.0, 1.0, 3.0],
        ])
        .unwrap();
        let m = pca_fit(&x, 1.0).unwrap();
        assert_eq!(m.k, 2);
    }

    #[test]
    fn mean_row_maps_to_origin() {
        let x = diagonal_covariance_rows(&[0.5, 0.3, 0.2]);
        let shifted = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().map(|v| v + 3.0).collect(),
        )
        .unwrap();
        let m = pca_fit(&shifted, 0.9).unwrap();
        let z = pca_transform(&m, &Matrix::from_rows(std::slice::from_ref(&m.mean)).unwrap()).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(pca_fit(&Matrix::zeros(1, 3), 0.9).is_err());
        assert!(pca_fit(&Matrix::zeros(4, 3), 0.0).is_err());
        let x = diagonal_covariance_rows(&[0.5, 0.5]);
        let m = pca_fit(&x, 0.9).unwrap();
        assert!(pca_transform(&m, &Matrix::zeros(2, 3)).is_err());
    }
}
