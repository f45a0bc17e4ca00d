//! Closed-form stabilized weights `f(T) / f(T | X)` for the Gaussian
//! assignment model `vec(T) | X ~ N(A x_{1:m}, s^2 I)`.

use nalgebra::{DMatrix, DVector};

use super::scenario::ScenarioTruth;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub fn oracle_weights(data: &Dataset, truth: &ScenarioTruth) -> Result<DVector<f64>> {
    let a = truth.assignment_matrix();
    let (pq, m) = a.shape();
    if data.p() * data.q() != pq {
        return Err(Error::UnsupportedDgp(format!(
            "dataset treatment has {} entries, truth describes {pq}",
            data.p() * data.q()
        )));
    }
    if m > data.l() {
        return Err(Error::UnsupportedDgp("assignment uses more covariates than the data has".into()));
    }
    if !(truth.treatment_noise_sd > 0.0) {
        return Err(Error::UnsupportedDgp("degenerate treatment noise".into()));
    }
    let s2 = truth.treatment_noise_sd.powi(2);
    let rho = truth.covariate_correlation;
    let sigma_x = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho });
    let marginal_cov = &a * sigma_x * a.transpose() + DMatrix::identity(pq, pq) * s2;
    let chol = marginal_cov
        .cholesky()
        .ok_or_else(|| Error::UnsupportedDgp("marginal treatment covariance not positive definite".into()))?;
    let log_det_marginal: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_det_conditional = pq as f64 * s2.ln();

    let mut w = DVector::zeros(data.n());
    for i in 0..data.n() {
        let t = data.treatments().row(i).transpose();
        let x = data.covariates().row(i).columns(0, m).transpose();
        let resid = &t - &a * x;
        let quad_marginal = t.dot(&chol.solve(&t));
        let quad_conditional = resid.norm_squared() / s2;
        let log_w = -0.5 * (quad_marginal + log_det_marginal) + 0.5 * (quad_conditional + log_det_conditional);
        w[i] = log_w.exp();
    }
    Ok(w)
}
