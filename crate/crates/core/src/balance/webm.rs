use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{bfgs, newton};
use super::{finish, tilt, tilt_hessian, BalanceConfig, BalanceResult, DualSolver};
use crate::error::{Error, Result};
use crate::moments::MomentSystem;

/// Mean-form dual `log((1/n) sum_i exp(M~_i' theta)) + sqrt(delta) ||theta||`.
///
/// This is the profile of [`super::dual_objective`] over the mean-one
/// multiplier, divided by `n`. Its gradient is the normalized-tilt imbalance
/// plus the norm subgradient, so a stationary point has imbalance exactly
/// `-sqrt(delta) theta / ||theta||`.
fn profiled(
    ms: &MomentSystem,
    theta: &DVector<f64>,
    root_delta: f64,
    epsilon: f64,
    want_hessian: bool,
) -> (f64, DVector<f64>, Option<DMatrix<f64>>) {
    match tilt(ms, theta) {
        Some(t) => {
            let norm = theta.norm();
            let value = t.log_mean_exp + root_delta * norm;
            let mean = ms.matrix().tr_mul(&t.probs);
            let grad = &mean + theta * (root_delta / norm.max(epsilon));
            let hess = want_hessian.then(|| {
                let mut h = tilt_hessian(ms, &t.probs, &mean);
                if root_delta > 0.0 {
                    // sqrt(delta) (I - u u') / ||theta||
                    let r = norm.max(epsilon);
                    let c = root_delta / r;
                    for i in 0..h.nrows() {
                        h[(i, i)] += c;
                    }
                    h.ger(-c / (r * r), theta, theta, 1.0);
                }
                h
            });
            (value, grad, hess)
        }
        None => (f64::INFINITY, DVector::zeros(theta.len()), None),
    }
}

/// Dual values below `-ln n` cannot occur for a feasible primal, since the
/// mean entropy of mean-one weights is at most `ln n`.
fn unbounded_guard(n: usize) -> impl FnMut(&DVector<f64>, f64) -> Result<()> {
    let floor = -(n as f64).ln() - 1e-9;
    move |_, value| {
        if value < floor {
            Err(Error::DivergingDual(format!(
                "dual objective {value:.6} below -ln(n) = {floor:.6}: balance constraints are infeasible"
            )))
        } else {
            Ok(())
        }
    }
}

/// Weighted Euclidean balancing weights at threshold `cfg.delta`.
pub fn solve_weights(ms: &MomentSystem, cfg: &BalanceConfig) -> Result<BalanceResult> {
    cfg.validate()?;
    let k = ms.k_effective();
    let n = ms.n();
    let root_delta = cfg.delta.sqrt();
    let uniform = ms.imbalance(&DVector::from_element(n, 1.0))?;

    // theta = 0 is optimal iff the uniform imbalance already lies in the ball
    if cfg.delta > 0.0 && uniform.norm_squared() <= cfg.delta {
        return finish(ms, DVector::zeros(k), cfg.delta, cfg.normalize_weights, vec![0.0], true, 0, 0.0);
    }
    if uniform.amax() < cfg.gradient_tolerance {
        return finish(ms, DVector::zeros(k), cfg.delta, cfg.normalize_weights, vec![0.0], true, 0, uniform.amax());
    }

    let theta0 = if cfg.delta > 0.0 {
        // step off the kink along the steepest-descent direction
        -uniform.normalize() * 1e-3
    } else {
        DVector::zeros(k)
    };
    let eps = cfg.smoothing_epsilon;
    let m = match cfg.solver {
        DualSolver::Newton => newton(
            |theta, hess| Ok(profiled(ms, theta, root_delta, eps, hess)),
            theta0,
            cfg.gradient_tolerance,
            cfg.max_iterations,
            unbounded_guard(n),
        )?,
        DualSolver::Bfgs => bfgs(
            |theta| {
                let (v, g, _) = profiled(ms, theta, root_delta, eps, false);
                Ok((v, g))
            },
            theta0,
            cfg.gradient_tolerance,
            cfg.max_iterations * 20,
            unbounded_guard(n),
        )?,
    };
    let mut trace = vec![0.0];
    trace.extend(m.trace);
    finish(ms, m.x, cfg.delta, cfg.normalize_weights, trace, m.converged, m.iterations, m.gradient_norm)
}

/// Exact entropy balancing: the `delta = 0` case, which must zero every
/// column imbalance.
pub fn solve_exact_entropy(ms: &MomentSystem, cfg: &BalanceConfig) -> Result<BalanceResult> {
    let cfg = BalanceConfig { delta: 0.0, ..cfg.clone() };
    solve_weights(ms, &cfg)
}

/// Logarithmic grid `{1e-4, ..., 1} * K_effective / n`.
pub fn default_delta_grid(ms: &MomentSystem, points: usize) -> Vec<f64> {
    let scale = ms.k_effective() as f64 / ms.n() as f64;
    let points = points.max(1);
    (0..points)
        .map(|i| {
            let e = if points == 1 { 0.0 } else { -4.0 + 4.0 * i as f64 / (points - 1) as f64 };
            scale * 10f64.powf(e)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPathEntry {
    pub delta: f64,
    pub weim: Option<f64>,
    pub effective_sample_size: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Tuning {
    pub delta_star: f64,
    pub result: BalanceResult,
    pub path: Vec<DeltaPathEntry>,
    /// Per-grid-point results aligned with `path`; `None` where solving failed.
    pub results: Vec<Option<BalanceResult>>,
}

/// Solves over a grid of thresholds and keeps the one with the smallest
/// achieved WEIM among converged solves. Ties go to the larger delta.
pub fn tune_delta(ms: &MomentSystem, grid: &[f64], cfg: &BalanceConfig) -> Result<Tuning> {
    if grid.is_empty() {
        return Err(Error::Parameter("delta grid is empty".into()));
    }
    if let Some(d) = grid.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::Parameter(format!("delta grid entries must be positive, got {d}")));
    }
    let solved: Vec<Result<BalanceResult>> = grid
        .par_iter()
        .map(|&delta| solve_weights(ms, &BalanceConfig { delta, ..cfg.clone() }))
        .collect();

    let mut path = Vec::with_capacity(grid.len());
    let mut results: Vec<Option<BalanceResult>> = Vec::with_capacity(grid.len());
    let mut best: Option<usize> = None;
    for (i, (delta, r)) in grid.iter().zip(solved).enumerate() {
        match r {
            Ok(res) => {
                path.push(DeltaPathEntry {
                    delta: *delta,
                    weim: Some(res.weim),
                    effective_sample_size: Some(res.effective_sample_size),
                    converged: res.converged,
                    error: None,
                });
                if res.converged {
                    best = match best {
                        None => Some(i),
                        Some(b) => {
                            let bres: &BalanceResult = results[b].as_ref().unwrap();
                            let tie = (res.weim - bres.weim).abs() <= 1e-12 * bres.weim.abs().max(1e-300);
                            if res.weim < bres.weim && !tie || tie && *delta > grid[b] {
                                Some(i)
                            } else {
                                Some(b)
                            }
                        }
                    };
                }
                results.push(Some(res));
            }
            Err(e) => {
                path.push(DeltaPathEntry {
                    delta: *delta,
                    weim: None,
                    effective_sample_size: None,
                    converged: false,
                    error: Some(e.to_string()),
                });
                results.push(None);
            }
        }
    }
    let Some(b) = best else {
        let detail = path
            .iter()
            .map(|p| format!("delta={:.3e}: {}", p.delta, p.error.as_deref().unwrap_or("not converged")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::TuningFailed(detail));
    };
    Ok(Tuning {
        delta_star: grid[b],
        result: results[b].clone().unwrap(),
        path,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn five() -> MomentSystem {
        MomentSystem::from_matrix(DMatrix::from_column_slice(5, 1, &[-1.2, -0.4, 0.1, 0.5, 1.0])).unwrap()
    }

    fn skewed() -> MomentSystem {
        // uncentered column: uniform imbalance 0.3
        MomentSystem::from_matrix(DMatrix::from_column_slice(5, 1, &[-0.9, -0.1, 0.4, 0.8, 1.3])).unwrap()
    }

    #[test]
    fn balanced_input_is_fixed_point() {
        let ms = MomentSystem::from_matrix(DMatrix::zeros(4, 1)).unwrap();
        let r = solve_weights(&ms, &BalanceConfig::with_delta(0.1)).unwrap();
        assert!(r.theta.iter().all(|t| *t == 0.0));
        assert!(r.weights.iter().all(|w| (*w - 1.0).abs() < 1e-15));
        assert_eq!(r.weim, 0.0);
        let r = solve_exact_entropy(&ms, &BalanceConfig::default()).unwrap();
        assert!(r.weights.iter().all(|w| (*w - 1.0).abs() < 1e-15));
    }

    #[test]
    fn centered_column_needs_no_tilt() {
        let r = solve_weights(&five(), &BalanceConfig::with_delta(0.01)).unwrap();
        assert!(r.converged);
        assert!(r.weim <= 0.01 + 1e-8);
        let eb = solve_exact_entropy(&five(), &BalanceConfig::default()).unwrap();
        assert!(eb.imbalance(&five())[0].abs() < 1e-6);
    }

    #[test]
    fn active_constraint_hits_threshold() {
        let ms = skewed();
        let r = solve_weights(&ms, &BalanceConfig::with_delta(0.01)).unwrap();
        assert!(r.converged);
        assert!((r.weim - 0.01).abs() < 1e-8, "weim {}", r.weim);
        let mean = r.weights.iter().sum::<f64>() / 5.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn exact_entropy_zeroes_imbalance() {
        let ms = skewed();
        let r = solve_exact_entropy(&ms, &BalanceConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.imbalance(&ms)[0].abs() < 1e-9);
    }

    #[test]
    fn infeasible_exact_balance_diverges() {
        // every row positive: no positive weights can zero the mean
        let ms = MomentSystem::from_matrix(DMatrix::from_column_slice(3, 1, &[0.2, 0.5, 1.0])).unwrap();
        let err = solve_exact_entropy(&ms, &BalanceConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DivergingDual(_)), "{err}");
    }

    #[test]
    fn singleton_grid() {
        let t = tune_delta(&skewed(), &[0.05], &BalanceConfig::default()).unwrap();
        assert_eq!(t.delta_star, 0.05);
        assert_eq!(t.path.len(), 1);
    }

    #[test]
    fn grid_rejects_nonpositive() {
        assert!(tune_delta(&skewed(), &[0.1, 0.0], &BalanceConfig::default()).is_err());
        assert!(tune_delta(&skewed(), &[], &BalanceConfig::default()).is_err());
    }

    #[test]
    fn default_grid_shape() {
        let g = default_delta_grid(&skewed(), 10);
        assert_eq!(g.len(), 10);
        assert!((g[0] - 0.2e-4).abs() < 1e-18);
        assert!((g[9] - 0.2).abs() < 1e-15);
    }
}
