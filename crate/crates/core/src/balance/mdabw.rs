//! Per-constraint approximate balancing: `|imbalance_k| <= delta_k` for each
//! column separately, via the L1-penalized dual
//! `log((1/n) sum_i exp(M~_i' theta)) + sum_k delta_k |theta_k|`.

use nalgebra::{DMatrix, DVector};

use super::optim::{fista_l1, prox_newton_l1};
use super::{finish, solve_exact_entropy, tilt, tilt_hessian, BalanceConfig, BalanceResult};
use crate::error::{Error, Result};
use crate::moments::MomentSystem;

/// `delta_k = c / sqrt(n)` for every retained column.
pub fn default_mdabw_deltas(ms: &MomentSystem, c: f64) -> Vec<f64> {
    vec![c / (ms.n() as f64).sqrt(); ms.k_effective()]
}

fn smooth_part(
    ms: &MomentSystem,
    theta: &DVector<f64>,
    want_hessian: bool,
) -> (f64, DVector<f64>, Option<DMatrix<f64>>) {
    match tilt(ms, theta) {
        Some(t) => {
            let mean = ms.matrix().tr_mul(&t.probs);
            let hess = want_hessian.then(|| tilt_hessian(ms, &t.probs, &mean));
            (t.log_mean_exp, mean, hess)
        }
        None => (f64::INFINITY, DVector::zeros(theta.len()), None),
    }
}

fn guard(n: usize) -> impl FnMut(&DVector<f64>, f64) -> Result<()> {
    let floor = -(n as f64).ln() - 1e-9;
    move |_, v| {
        if v < floor {
            Err(Error::DivergingDual("penalized dual unbounded below: constraints infeasible".into()))
        } else {
            Ok(())
        }
    }
}

/// Minimal-dispersion-style approximate balancing with one threshold per
/// constraint column.
pub fn solve_mdabw(ms: &MomentSystem, deltas: &[f64], cfg: &BalanceConfig) -> Result<BalanceResult> {
    cfg.validate()?;
    let k = ms.k_effective();
    if deltas.len() != k {
        return Err(Error::LengthMismatch { expected: k, got: deltas.len() });
    }
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
        return Err(Error::Parameter(format!("per-constraint deltas must be finite and >= 0, got {d}")));
    }
    if deltas.iter().all(|d| *d == 0.0) {
        return solve_exact_entropy(ms, cfg);
    }
    let uniform = ms.imbalance(&DVector::from_element(ms.n(), 1.0))?;
    let delta_sq: f64 = deltas.iter().map(|d| d * d).sum();
    if uniform.iter().zip(deltas).all(|(u, d)| u.abs() <= *d) {
        return finish(ms, DVector::zeros(k), delta_sq, cfg.normalize_weights, vec![0.0], true, 0, 0.0);
    }

    let m = prox_newton_l1(
        |t, hess| Ok(smooth_part(ms, t, hess)),
        deltas,
        DVector::zeros(k),
        cfg.gradient_tolerance,
        cfg.max_iterations,
        guard(ms.n()),
    )?;
    if m.converged {
        return finish(ms, m.x, delta_sq, cfg.normalize_weights, m.trace, true, m.iterations, m.gradient_norm);
    }

    // stalled line search: continue from there with first-order steps
    let fine = fista_l1(
        |t| {
            let (f, g, _) = smooth_part(ms, t, false);
            Ok((f, g))
        },
        deltas,
        m.x,
        cfg.gradient_tolerance,
        cfg.max_iterations * 100,
        guard(ms.n()),
    )?;
    let mut trace = m.trace;
    trace.extend(fine.trace.into_iter().skip(1));
    let iterations = m.iterations + fine.iterations;
    finish(ms, fine.x, delta_sq, cfg.normalize_weights, trace, fine.converged, iterations, fine.gradient_norm)
}
