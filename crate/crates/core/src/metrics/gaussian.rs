use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, shape_err, Error, Result};
use crate::ndkernel::Array;

/// Symmetry and PSD slack for covariance inputs.
pub const PSD_TOL: f64 = 1e-9;
/// Fréchet values in `[-FRECHET_ROUNDOFF, 0)` are reported as 0.
pub const FRECHET_ROUNDOFF: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(shape_err(
                "gaussian_stats",
                format!("mean of dim {d}, covariance {}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > PSD_TOL {
            return Err(invalid(format!("covariance asymmetric by {asym:e}")));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        if d > 0 {
            let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
            if min < -PSD_TOL {
                return Err(Error::NotPsd { min_eigenvalue: min });
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Sample mean and unbiased covariance of flattened samples.
pub fn fit_gaussian(samples: &[Array]) -> Result<GaussianStats> {
    if samples.len() < 2 {
        return Err(invalid(format!("need at least 2 samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(shape_err("fit_gaussian", format!("sample of {} values vs {d}", bad.len())));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s.data());
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s.data()) - &mean;
        cov.syger(1.0, &c, &c, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    cov /= n - 1.0;
    GaussianStats::new(mean, cov)
}

/// Eigenvalues below this fraction of the largest are rounding noise of a
/// rank-deficient matrix and are zeroed before taking square roots, where
/// `sqrt` would otherwise amplify `1e-16` noise to `1e-8`.
pub const SPECTRUM_FLOOR: f64 = 1e-12;

fn root_eigenvalues(eigenvalues: &DVector<f64>) -> DVector<f64> {
    if eigenvalues.is_empty() {
        return eigenvalues.clone();
    }
    let floor = SPECTRUM_FLOOR * eigenvalues.amax();
    eigenvalues.map(|l| if l > floor { l.sqrt() } else { 0.0 })
}

/// Symmetric PSD square root through an eigendecomposition, zeroing
/// negative and negligible eigenvalues.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = root_eigenvalues(&eig.eigenvalues);
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|² + tr(S1 + S2 - 2 (S1^½ S2 S1^½)^½)`.
pub fn frechet_gaussian(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(shape_err("frechet_gaussian", format!("dims {} vs {}", g1.dim(), g2.dim())));
    }
    let diff = (&g1.mean - &g2.mean).norm_squared();
    let r1 = sqrt_psd(&g1.cov);
    let mut inner = &r1 * &g2.cov * &r1;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = root_eigenvalues(&SymmetricEigen::new(inner).eigenvalues).sum();
    let value = diff + g1.cov.trace() + g2.cov.trace() - 2.0 * cross;
    if value < -FRECHET_ROUNDOFF {
        return Err(invalid(format!("negative Fréchet distance {value:e}")));
    }
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
        let d = mean.len();
        GaussianStats::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(d, d, cov),
        )
        .unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let g = stats(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_gaussian(&g, &g).unwrap().abs() < 1e-9);
    }

    #[test]
    fn mean_shift_is_squared_norm() {
        let a = stats(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = stats(&[1.0, -2.0, 0.5], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((frechet_gaussian(&a, &b).unwrap() - 5.25).abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_formula() {
        let a = stats(&[1.0], &[4.0]);
        let b = stats(&[-0.5], &[0.25]);
        let want = 1.5f64.powi(2) + (2.0f64 - 0.5).powi(2);
        assert!((frechet_gaussian(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_psd_and_asymmetric() {
        let bad = GaussianStats::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        );
        assert!(matches!(bad, Err(Error::NotPsd { .. })));
        let asym = GaussianStats::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        );
        assert!(asym.is_err());
    }

    #[test]
    fn fit_small_cases() {
        let x = Array::from_vec(vec![1.0, -3.0]);
        let g = fit_gaussian(&[x.clone(), x.scaled(-1.0)]).unwrap();
        assert!(g.mean().iter().all(|&m| m == 0.0));
        let same = fit_gaussian(&[x.clone(), x.clone(), x.clone()]).unwrap();
        assert!(same.cov().iter().all(|&c| c == 0.0));
        assert!(fit_gaussian(&[x]).is_err());
    }
}
