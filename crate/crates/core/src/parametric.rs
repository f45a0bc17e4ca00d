//! Weighted linear causal-effect model `s(T; beta) = c + <B, T>`, its
//! sandwich variance, and percentile bootstrap intervals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::BalancePipelineConfig;

/// Relative threshold on the diagonal of `R` below which a design column is
/// declared linearly dependent on the preceding ones.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEffectModel {
    pub intercept: f64,
    /// `p x q` estimate of `B`.
    pub coefficient_matrix: DMatrix<f64>,
    pub fitted_values: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl LinearEffectModel {
    pub fn predict(&self, t: &DMatrix<f64>) -> f64 {
        self.intercept + self.coefficient_matrix.dot(t)
    }

    /// `(c, vec(B))` with `vec` column-major.
    pub fn coefficients(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.coefficient_matrix.len() + 1);
        v[0] = self.intercept;
        v.rows_mut(1, self.coefficient_matrix.len())
            .copy_from_slice(self.coefficient_matrix.as_slice());
        v
    }

    /// Element-wise RMSE of the coefficient matrix against `truth`.
    pub fn coefficient_rmse(&self, truth: &DMatrix<f64>) -> f64 {
        ((&self.coefficient_matrix - truth).norm_squared() / truth.len() as f64).sqrt()
    }
}

/// Labels matching [`LinearEffectModel::coefficients`]: `intercept`, then
/// `b_r_c` (1-based) in column-major order.
pub fn coefficient_names(p: usize, q: usize) -> Vec<String> {
    let mut names = vec!["intercept".to_string()];
    for c in 0..q {
        for r in 0..p {
            names.push(format!("b_{}_{}", r + 1, c + 1));
        }
    }
    names
}

/// `h(T_i) = (1, vec(T_i))` stacked as rows.
fn design(data: &Dataset) -> DMatrix<f64> {
    let pq = data.p() * data.q();
    DMatrix::from_fn(data.n(), pq + 1, |i, c| if c == 0 { 1.0 } else { data.treatments()[(i, c - 1)] })
}

fn check_weights(data: &Dataset, weights: &DVector<f64>) -> Result<()> {
    if weights.len() != data.n() {
        return Err(Error::LengthMismatch { expected: data.n(), got: weights.len() });
    }
    if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Input(format!("weight {i} is negative or not finite")));
    }
    if !data.is_finite() {
        return Err(Error::Input("dataset contains non-finite values".into()));
    }
    Ok(())
}

/// Weighted least squares `argmin sum_i w_i (Y_i - c - <B, T_i>)^2`, solved
/// by a QR factorization of the `sqrt(w)`-scaled design.
pub fn fit_linear_effect(data: &Dataset, weights: &DVector<f64>) -> Result<LinearEffectModel> {
    check_weights(data, weights)?;
    let h = design(data);
    let k = h.ncols();
    let mut scaled = h.clone();
    let mut target = data.outcomes().clone();
    for i in 0..data.n() {
        let s = weights[i].sqrt();
        scaled.row_mut(i).scale_mut(s);
        target[i] *= s;
    }
    if data.n() < k {
        return Err(Error::SingularDesign { columns: (data.n()..k).collect() });
    }
    let qr = scaled.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| scaled.column(j).norm()).fold(0.0, f64::max);
    let dependent: Vec<usize> = (0..k)
        .filter(|&j| !(r[(j, j)].abs() > RANK_TOLERANCE * scale.max(f64::MIN_POSITIVE)))
        .collect();
    if !dependent.is_empty() {
        return Err(Error::SingularDesign { columns: dependent });
    }
    let qty = qr.q().tr_mul(&target);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign { columns: Vec::new() })?;

    let fitted = &h * &beta;
    let residuals = data.outcomes() - &fitted;
    Ok(LinearEffectModel {
        intercept: beta[0],
        coefficient_matrix: DMatrix::from_column_slice(data.p(), data.q(), &beta.as_slice()[1..]),
        fitted_values: fitted.iter().copied().collect(),
        residuals: residuals.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Sandwich,
    BootstrapPercentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// Covariance of `(c, vec(B))`.
    pub covariance: DMatrix<f64>,
    pub standard_errors: Vec<f64>,
    pub method: VarianceMethod,
}

/// Plug-in sandwich `U^-1 meat U^-1 / n` with `U = (2/n) sum w h h'` and
/// `meat = (4/n) sum w^2 r^2 h h'`, weights first rescaled to mean one.
pub fn sandwich_variance(
    model: &LinearEffectModel,
    data: &Dataset,
    weights: &DVector<f64>,
) -> Result<VarianceEstimate> {
    check_weights(data, weights)?;
    if model.residuals.len() != data.n() {
        return Err(Error::LengthMismatch { expected: data.n(), got: model.residuals.len() });
    }
    let n = data.n() as f64;
    let mean = weights.mean();
    if !(mean > 0.0) {
        return Err(Error::Input("weights sum to zero".into()));
    }
    let w = weights / mean;
    let h = design(data);
    let k = h.ncols();
    let mut bread_rows = h.clone();
    let mut meat_rows = h.clone();
    for i in 0..data.n() {
        bread_rows.row_mut(i).scale_mut(w[i].sqrt());
        meat_rows.row_mut(i).scale_mut(w[i] * model.residuals[i]);
    }
    let u = bread_rows.tr_mul(&bread_rows) * (2.0 / n);
    let meat = meat_rows.tr_mul(&meat_rows) * (4.0 / n);
    let u_inv = u.cholesky().ok_or(Error::SingularHessian)?.inverse();
    let mut covariance = &u_inv * meat * &u_inv / n;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let standard_errors = (0..k).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect();
    Ok(VarianceEstimate { covariance, standard_errors, method: VarianceMethod::Sandwich })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapIntervals {
    pub names: Vec<String>,
    /// Full-sample estimate of `(c, vec(B))`.
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub replicates: usize,
    pub failed: usize,
    /// Weighting method actually used in the replicates, with any tuned
    /// quantities fixed from the full sample.
    pub pipeline: BalancePipelineConfig,
}

impl BootstrapIntervals {
    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.lower[j] <= value && value <= self.upper[j]
    }
}

/// Linear-interpolation sample quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Nonparametric percentile bootstrap of the full weighting-plus-fit
/// pipeline. Replicate `b` draws its rows from its own ChaCha stream `b`
/// under `seed`, so results do not depend on scheduling.
pub fn bootstrap_ci(
    data: &Dataset,
    pipeline: &BalancePipelineConfig,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapIntervals> {
    if replicates < 2 {
        return Err(Error::Parameter(format!("need at least 2 bootstrap replicates, got {replicates}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("level must be in (0, 1), got {level}")));
    }
    let (frozen, full_weights) = pipeline.freeze(data)?;
    let full = fit_linear_effect(data, &full_weights)?;
    let n = data.n();

    let draws: Vec<Option<DVector<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = data.select_rows(&idx);
            frozen
                .weights(&resampled, None)
                .and_then(|w| fit_linear_effect(&resampled, &w.weights_vector()))
                .map(|m| m.coefficients())
                .ok()
        })
        .collect();
    let failed = draws.iter().filter(|d| d.is_none()).count();
    if failed * 10 > replicates {
        return Err(Error::Bootstrap { failed, total: replicates });
    }
    let ok: Vec<DVector<f64>> = draws.into_iter().flatten().collect();
    let k = full.coefficients().len();
    let alpha = (1.0 - level) / 2.0;
    let mut lower = Vec::with_capacity(k);
    let mut upper = Vec::with_capacity(k);
    for j in 0..k {
        let mut col: Vec<f64> = ok.iter().map(|v| v[j]).collect();
        col.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&col, alpha));
        upper.push(quantile_sorted(&col, 1.0 - alpha));
    }
    Ok(BootstrapIntervals {
        names: coefficient_names(data.p(), data.q()),
        estimate: full.coefficients().iter().copied().collect(),
        lower,
        upper,
        level,
        replicates,
        failed,
        pipeline: frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate_scenario, reference_b};

    fn random_weights(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| 0.2 + rng.random::<f64>() * 2.0)
    }

    #[test]
    fn noiseless_recovery() {
        let (d, _) = generate_scenario(1, 100, 5).unwrap();
        let b = reference_b();
        let y = DVector::from_fn(d.n(), |i, _| 1.0 + b.dot(&d.treatment(i)));
        let d = d.with_outcomes(y).unwrap();
        let m = fit_linear_effect(&d, &DVector::from_element(d.n(), 1.0)).unwrap();
        assert!((m.intercept - 1.0).abs() < 1e-10);
        assert!((&m.coefficient_matrix - &b).amax() < 1e-10);
        assert!(m.residuals.iter().all(|r| r.abs() < 1e-9));
    }

    #[test]
    fn matches_normal_equations_oracle() {
        let (d, _) = generate_scenario(2, 50, 6).unwrap();
        let w = random_weights(50, 1);
        let m = fit_linear_effect(&d, &w).unwrap();
        // X' W X beta = X' W y through a Cholesky solve on explicit sums
        let k = 7;
        let mut xtx = DMatrix::<f64>::zeros(k, k);
        let mut xty = DVector::<f64>::zeros(k);
        for i in 0..50 {
            let mut h = vec![1.0];
            h.extend(d.treatments().row(i).iter());
            for a in 0..k {
                xty[a] += w[i] * h[a] * d.outcomes()[i];
                for b in 0..k {
                    xtx[(a, b)] += w[i] * h[a] * h[b];
                }
            }
        }
        let beta = xtx.cholesky().unwrap().solve(&xty);
        assert!((m.coefficients() - beta).amax() < 1e-9);
    }

    #[test]
    fn weighted_residuals_orthogonal() {
        let (d, _) = generate_scenario(1, 80, 2).unwrap();
        let w = random_weights(80, 2);
        let m = fit_linear_effect(&d, &w).unwrap();
        let h = design(&d);
        let r = DVector::from_vec(m.residuals.clone());
        let score = h.tr_mul(&r.component_mul(&w));
        assert!(score.amax() < 1e-8, "{score}");
    }

    #[test]
    fn scaling_weights_is_invariant() {
        let (d, _) = generate_scenario(1, 60, 3).unwrap();
        let w = random_weights(60, 3);
        let a = fit_linear_effect(&d, &w).unwrap();
        let b = fit_linear_effect(&d, &(&w * 4.0)).unwrap();
        assert!((a.coefficients() - b.coefficients()).amax() < 1e-12);
        let va = sandwich_variance(&a, &d, &w).unwrap();
        let vb = sandwich_variance(&a, &d, &(&w * 2.0)).unwrap();
        assert!((va.covariance - vb.covariance).amax() < 1e-14);
    }

    #[test]
    fn concentrated_weights_are_singular() {
        let (d, _) = generate_scenario(1, 30, 4).unwrap();
        let mut w = DVector::zeros(30);
        w[3] = 1.0;
        assert!(matches!(fit_linear_effect(&d, &w), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn duplicated_treatment_column_is_named() {
        let (d, _) = generate_scenario(1, 30, 4).unwrap();
        let mut t = d.treatments().clone();
        let c0 = t.column(0).into_owned();
        t.set_column(4, &c0);
        let d = Dataset::new(3, 2, t, d.covariates().clone(), d.outcomes().clone()).unwrap();
        match fit_linear_effect(&d, &DVector::from_element(30, 1.0)) {
            Err(Error::SingularDesign { columns }) => assert_eq!(columns, vec![5]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_residuals_zero_variance() {
        let (d, _) = generate_scenario(1, 40, 8).unwrap();
        let b = reference_b();
        let y = DVector::from_fn(d.n(), |i, _| 1.0 + b.dot(&d.treatment(i)));
        let d = d.with_outcomes(y).unwrap();
        let w = DVector::from_element(40, 1.0);
        let m = LinearEffectModel { residuals: vec![0.0; 40], ..fit_linear_effect(&d, &w).unwrap() };
        let v = sandwich_variance(&m, &d, &w).unwrap();
        assert_eq!(v.covariance.amax(), 0.0);
    }

    #[test]
    fn sandwich_is_symmetric_psd() {
        let (d, _) = generate_scenario(1, 200, 9).unwrap();
        let w = random_weights(200, 9);
        let m = fit_linear_effect(&d, &w).unwrap();
        let v = sandwich_variance(&m, &d, &w).unwrap();
        assert!((&v.covariance - v.covariance.transpose()).amax() < 1e-12);
        let eig = v.covariance.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-8);
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 0.5), 3.0);
        assert_eq!(quantile_sorted(&s, 0.1), 1.4);
        assert_eq!(coefficient_names(2, 1), vec!["intercept", "b_1_1", "b_2_1"]);
    }
}
