use nalgebra::{DMatrix, DVector};

use super::InfoError;

pub const PSD_TOL: f64 = 1e-10;

/// Multivariate normal; the covariance is symmetrised on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDistribution {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Returns the symmetrised matrix if it is PSD within [`PSD_TOL`].
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, InfoError> {
    if m.nrows() != m.ncols() {
        return Err(InfoError::Dimension(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(InfoError::Invalid(format!("{what} has non-finite entries")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > PSD_TOL * (1.0 + m.abs().max()) {
        return Err(InfoError::NotPsd(format!("{what} asymmetric by {asym:e}")));
    }
    let s = symmetrize(m);
    let lo = min_eigenvalue(&s);
    if lo < -PSD_TOL {
        return Err(InfoError::NotPsd(format!("{what} has eigenvalue {lo:e}")));
    }
    Ok(s)
}

/// `ln det` of a positive-definite matrix via Cholesky.
pub(crate) fn log_det_pd(m: &DMatrix<f64>, what: &str) -> Result<f64, InfoError> {
    let chol = m.clone().cholesky().ok_or_else(|| InfoError::Singular(what.to_string()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

impl GaussianDistribution {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, InfoError> {
        if cov.nrows() != mean.len() {
            return Err(InfoError::Dimension(format!("mean of length {} with {}x{} covariance", mean.len(), cov.nrows(), cov.ncols())));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(InfoError::Invalid("non-finite mean".into()));
        }
        let cov = check_psd(&cov, "covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self, InfoError> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: DVector::zeros(dim), cov: DMatrix::identity(dim, dim) }
    }

    pub fn diagonal(mean: &[f64], var: &[f64]) -> Result<Self, InfoError> {
        Self::new(DVector::from_column_slice(mean), DMatrix::from_diagonal(&DVector::from_column_slice(var)))
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

    /// Log-density at `x`; requires a positive-definite covariance.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64, InfoError> {
        if x.len() != self.dim() {
            return Err(InfoError::Dimension(format!("point of length {} for {}-d density", x.len(), self.dim())));
        }
        let chol = self.cov.clone().cholesky().ok_or_else(|| InfoError::Singular("covariance".into()))?;
        let diff = x - &self.mean;
        let sol = chol.solve(&diff);
        let maha = diff.dot(&sol);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let k = self.dim() as f64;
        Ok(-0.5 * (k * (2.0 * std::f64::consts::PI).ln() + log_det + maha))
    }
}

/// Closed-form `KL(p || q)`. Infinite when `p` is degenerate and `q` is not.
pub fn kl_gaussian(p: &GaussianDistribution, q: &GaussianDistribution) -> Result<f64, InfoError> {
    if p.dim() != q.dim() {
        return Err(InfoError::Dimension(format!("{} vs {} dimensions", p.dim(), q.dim())));
    }
    let chol_q = q.cov.clone().cholesky().ok_or_else(|| InfoError::Singular("q covariance".into()))?;
    let log_det_q = 2.0 * chol_q.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_det_p = match p.cov.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => return Ok(f64::INFINITY),
    };
    let trace = chol_q.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&chol_q.solve(&diff));
    let k = p.dim() as f64;
    Ok((0.5 * (trace + maha - k + log_det_q - log_det_p)).max(0.0))
}

/// `KL(N(mu, diag(exp(2 log_std))) || N(0, I))`, summed over coordinates.
pub fn kl_diag_to_standard(mu: &[f64], log_std: &[f64]) -> f64 {
    mu.iter()
        .zip(log_std)
        .map(|(&m, &s)| 0.5 * (m * m + (2.0 * s).exp() - 1.0 - 2.0 * s))
        .sum()
}

/// `0.5 (sum ln cov_ii - ln det cov)`.
pub fn total_correlation_gaussian(cov: &DMatrix<f64>) -> Result<f64, InfoError> {
    let s = check_psd(cov, "covariance")?;
    let log_det = log_det_pd(&s, "covariance")?;
    let sum_diag: f64 = s.diagonal().iter().map(|d| d.ln()).sum();
    Ok((0.5 * (sum_diag - log_det)).max(0.0))
}
