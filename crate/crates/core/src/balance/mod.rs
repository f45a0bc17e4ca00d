//! Balancing weights from the entropy dual.
//!
//! Everything here works in mean form: the imbalance of a weight vector is
//! `(1/n) M~^T w`, and the weighted Euclidean imbalance measure (WEIM) is its
//! squared Euclidean norm. Dual weights are exponential tilts
//! `w_i = exp(M~_i' theta - 1)`, renormalized to mean one.

mod mdabw;
pub mod optim;
mod webm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::MomentSystem;

pub use mdabw::{default_mdabw_deltas, solve_mdabw};
pub use webm::{default_delta_grid, solve_exact_entropy, solve_weights, tune_delta, DeltaPathEntry, Tuning};

/// Exponent spread beyond which a tilt is treated as numerically divergent.
pub const MAX_EXPONENT_SPREAD: f64 = 700.0;

/// Minimizer used for the smooth WEBM / exact-balancing dual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualSolver {
    #[default]
    Newton,
    Bfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    /// WEIM threshold `delta >= 0`.
    pub delta: f64,
    pub max_iterations: usize,
    /// Sup-norm tolerance on the (mean-form) dual gradient.
    pub gradient_tolerance: f64,
    /// Floor on `||theta||` in the norm-penalty gradient.
    pub smoothing_epsilon: f64,
    pub normalize_weights: bool,
    #[serde(default)]
    pub solver: DualSolver,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            delta: 0.0,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            smoothing_epsilon: 1e-10,
            normalize_weights: true,
            solver: DualSolver::Newton,
        }
    }
}

impl BalanceConfig {
    pub fn with_delta(delta: f64) -> Self {
        Self { delta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Parameter(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Parameter("gradient_tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be positive".into()));
        }
        if !(self.smoothing_epsilon >= 0.0) {
            return Err(Error::Parameter("smoothing_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceResult {
    pub theta: Vec<f64>,
    /// Log-normalizer added to the tilt so the weights have mean one:
    /// `log w_i + 1 = M~_i' theta + eta`.
    pub eta: f64,
    /// `exp(M~_i' theta - 1)` before renormalization.
    pub raw_weights: Vec<f64>,
    pub weights: Vec<f64>,
    pub weim: f64,
    pub delta_used: f64,
    /// Mean-form dual objective per accepted iterate.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub effective_sample_size: f64,
}

impl BalanceResult {
    pub fn weights_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }

    /// Per-column mean imbalance of the final weights.
    pub fn imbalance(&self, ms: &MomentSystem) -> DVector<f64> {
        ms.imbalance(&self.weights_vector()).expect("weights sized by the solver")
    }

    /// Primal entropy `sum_i w_i log w_i` of the final weights.
    pub fn entropy(&self) -> f64 {
        self.weights.iter().map(|w| if *w > 0.0 { w * w.ln() } else { 0.0 }).sum()
    }
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Weighted Euclidean imbalance measure `sum_k [(1/n) sum_i w_i M~_ik]^2`.
pub fn weim(weights: &DVector<f64>, ms: &MomentSystem) -> Result<f64> {
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Input(format!("weight {i} is not finite")));
    }
    Ok(ms.imbalance(weights)?.norm_squared())
}

/// Sum-form dual of the mean-form WEIM problem without the mean-one
/// constraint: `sum_i exp(M~_i' theta - 1) + n sqrt(delta) ||theta||`.
///
/// The gradient of the norm term uses `theta / max(||theta||, epsilon)`.
pub fn dual_objective(
    theta: &DVector<f64>,
    ms: &MomentSystem,
    delta: f64,
    epsilon: f64,
) -> Result<(f64, DVector<f64>)> {
    if theta.len() != ms.k_effective() {
        return Err(Error::LengthMismatch { expected: ms.k_effective(), got: theta.len() });
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("theta is not finite".into()));
    }
    let a = ms.matrix() * theta;
    if a.max() >= MAX_EXPONENT_SPREAD {
        return Err(Error::DivergingDual(format!("exponent {} overflows", a.max())));
    }
    let e = a.map(|v| (v - 1.0).exp());
    let norm = theta.norm();
    let n = ms.n() as f64;
    let scale = n * delta.sqrt();
    let value = e.sum() + scale * norm;
    let gradient = ms.matrix().tr_mul(&e) + theta * (scale / norm.max(epsilon));
    Ok((value, gradient))
}

/// Evaluation of the log-mean-exp tilt at `theta`.
pub(crate) struct Tilt {
    /// `log((1/n) sum_i exp(M~_i' theta))`
    pub log_mean_exp: f64,
    /// Normalized tilt probabilities (sum to one).
    pub probs: DVector<f64>,
    pub exponents: DVector<f64>,
}

/// Hessian of the log-mean-exp: the tilt-weighted covariance of the rows,
/// `M~' diag(p) M~ - (M~' p)(M~' p)'`.
pub(crate) fn tilt_hessian(ms: &MomentSystem, probs: &DVector<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = ms.matrix().clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= probs[i].sqrt();
    }
    let mut h = scaled.tr_mul(&scaled);
    h.ger(-1.0, mean, mean, 1.0);
    h
}

pub(crate) fn tilt(ms: &MomentSystem, theta: &DVector<f64>) -> Option<Tilt> {
    let a = ms.matrix() * theta;
    let hi = a.max();
    let lo = a.min();
    if !(hi - lo <= MAX_EXPONENT_SPREAD) {
        return None;
    }
    let e = a.map(|v| (v - hi).exp());
    let s = e.sum();
    Some(Tilt {
        log_mean_exp: hi + (s / ms.n() as f64).ln(),
        probs: e / s,
        exponents: a,
    })
}

/// Assembles a result from a dual solution.
pub(crate) fn finish(
    ms: &MomentSystem,
    theta: DVector<f64>,
    delta_used: f64,
    normalize: bool,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
) -> Result<BalanceResult> {
    let t = tilt(ms, &theta)
        .ok_or_else(|| Error::DivergingDual("exponent spread exceeds numeric range".into()))?;
    let n = ms.n() as f64;
    let raw: Vec<f64> = t.exponents.iter().map(|a| (a - 1.0).exp()).collect();
    // w_i = n p_i has mean one exactly up to rounding
    let normalized: Vec<f64> = t.probs.iter().map(|p| p * n).collect();
    let eta = 1.0 - t.log_mean_exp;
    let weights = if normalize {
        let mean = normalized.iter().sum::<f64>() / n;
        normalized.iter().map(|w| w / mean).collect()
    } else {
        normalized
    };
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::DivergingDual("weights underflowed to zero".into()));
    }
    let wv = DVector::from_column_slice(&weights);
    let achieved = weim(&wv, ms)?;
    Ok(BalanceResult {
        theta: theta.iter().copied().collect(),
        eta,
        raw_weights: raw,
        effective_sample_size: effective_sample_size(&weights),
        weights,
        weim: achieved,
        delta_used,
        objective_trace: trace,
        converged,
        iterations,
        gradient_norm,
    })
}
