//! Small unconstrained minimizers used by the dual solvers.
//!
//! Objectives may return `f64::INFINITY` for points outside their numeric
//! domain; the line searches treat those as rejected trial steps.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// BFGS with Armijo backtracking on the inverse-Hessian approximation.
///
/// `stop` is evaluated on every accepted iterate and may end the run early
/// (for example when the objective certifies unboundedness).
pub fn bfgs<F, S>(
    mut objective: F,
    x0: DVector<f64>,
    tolerance: f64,
    max_iterations: usize,
    mut stop: S,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    S: FnMut(&DVector<f64>, f64) -> Result<()>,
{
    let dim = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = objective(&x)?;
    let mut trace = vec![fx];
    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut scaled = false;
    let mut iterations = 0;

    while iterations < max_iterations {
        if g.amax() < tolerance {
            break;
        }
        let mut direction = -(&h * &g);
        let mut slope = g.dot(&direction);
        if !(slope < 0.0) {
            h.fill_with_identity();
            direction = -g.clone();
            slope = -g.norm_squared();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + step * &direction;
            let (ft, gt) = objective(&trial)?;
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if h != DMatrix::identity(dim, dim) {
                h.fill_with_identity();
                scaled = false;
                continue;
            }
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            if !scaled {
                h *= sy / y.norm_squared();
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            h.ger(-rho, &s, &hy, 1.0);
            h.ger(-rho, &hy, &s, 1.0);
            h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        iterations += 1;
        stop(&x, fx)?;
    }

    let gradient_norm = g.amax();
    Ok(Minimum {
        x,
        value: fx,
        gradient_norm,
        iterations,
        trace,
        converged: gradient_norm < tolerance,
    })
}

/// Levenberg-damped Newton. `objective` returns value, gradient and (on
/// request) Hessian. Each step solves `(H + mu s I) d = -g`, where `s` is the
/// largest Hessian diagonal entry; `mu` shrinks after a full step passes the
/// Armijo test and grows after a rejection.
pub fn newton<F, S>(
    mut objective: F,
    x0: DVector<f64>,
    tolerance: f64,
    max_iterations: usize,
    mut stop: S,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>, bool) -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)>,
    S: FnMut(&DVector<f64>, f64) -> Result<()>,
{
    let mut x = x0;
    let (mut fx, mut g, mut h) = objective(&x, true)?;
    let mut trace = vec![fx];
    let mut iterations = 0;
    let mut mu = 0.0f64;

    'outer: while iterations < max_iterations {
        if g.amax() < tolerance {
            break;
        }
        let hess = h.take().expect("hessian requested");
        let scale = hess.diagonal().amax().max(f64::MIN_POSITIVE);
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut damped = hess.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += mu * scale;
            }
            let Some(chol) = damped.cholesky() else {
                mu = (mu * 4.0).max(1e-12);
                continue;
            };
            let d = -chol.solve(&g);
            let slope = g.dot(&d);
            let trial = &x + &d;
            let (ft, _, _) = objective(&trial, false)?;
            if slope < 0.0 && ft.is_finite() && ft <= fx + ARMIJO_C1 * slope {
                mu /= 4.0;
                if mu < 1e-12 {
                    mu = 0.0;
                }
                accepted = Some(trial);
                break;
            }
            if slope.abs() <= f64::EPSILON * fx.abs().max(1.0) * 1e-3 {
                // no representable decrease left
                break 'outer;
            }
            mu = (mu * 4.0).max(1e-8);
        }
        let Some(x_new) = accepted else { break };
        let (f_new, g_new, h_new) = objective(&x_new, true)?;
        x = x_new;
        fx = f_new;
        g = g_new;
        h = h_new;
        trace.push(fx);
        iterations += 1;
        stop(&x, fx)?;
    }

    let gradient_norm = g.amax();
    Ok(Minimum { x, value: fx, gradient_norm, iterations, trace, converged: gradient_norm < tolerance })
}

/// Proximal Newton for `smooth(x) + sum_k penalty_k |x_k|`.
///
/// Each outer step minimizes the local quadratic model plus the L1 term by
/// cyclic coordinate descent, then backtracks on the true objective.
/// Convergence is the sup-norm of the L1 optimality residual.
pub fn prox_newton_l1<F, S>(
    mut smooth: F,
    penalty: &[f64],
    x0: DVector<f64>,
    tolerance: f64,
    max_iterations: usize,
    mut stop: S,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>, bool) -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)>,
    S: FnMut(&DVector<f64>, f64) -> Result<()>,
{
    let dim = x0.len();
    let l1 = |x: &DVector<f64>| x.iter().zip(penalty).map(|(v, c)| c * v.abs()).sum::<f64>();
    let mut x = x0;
    let (f0, mut g, mut h) = smooth(&x, true)?;
    let mut total = f0 + l1(&x);
    let mut trace = vec![total];
    let mut iterations = 0;
    let mut residual = l1_residual(&g, &x, penalty);

    while iterations < max_iterations && residual >= tolerance {
        let hess = h.take().expect("hessian requested");
        // quadratic model in z = x + d: g'd + d'Hd/2 + sum c_k |z_k|
        let ridge = 1e-12 * hess.diagonal().amax().max(1e-300);
        let mut z = x.clone();
        let mut hd = DVector::<f64>::zeros(dim);
        for _sweep in 0..200 {
            let mut max_change = 0.0f64;
            for k in 0..dim {
                let hkk = hess[(k, k)] + ridge;
                let grad_k = g[k] + hd[k];
                let u = z[k] - grad_k / hkk;
                let thr = penalty[k] / hkk;
                let zk = if u.abs() <= thr { 0.0 } else { u - thr * u.signum() };
                let delta = zk - z[k];
                if delta != 0.0 {
                    hd.axpy(delta, &hess.column(k), 1.0);
                    hd[k] += ridge * delta;
                    z[k] = zk;
                    max_change = max_change.max(delta.abs() * hkk.sqrt());
                }
            }
            if max_change < tolerance * 1e-3 {
                break;
            }
        }
        let d = &z - &x;
        let decrease = g.dot(&d) + l1(&z) - l1(&x);
        if !(decrease < 0.0) {
            break;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + step * &d;
            let (ft, _, _) = smooth(&trial, false)?;
            let tt = ft + l1(&trial);
            if tt.is_finite() && tt <= total + ARMIJO_C1 * step * decrease {
                accepted = Some((trial, tt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, t_new)) = accepted else { break };
        x = x_new;
        total = t_new;
        let (_, g_new, h_new) = smooth(&x, true)?;
        g = g_new;
        h = h_new;
        trace.push(total);
        iterations += 1;
        residual = l1_residual(&g, &x, penalty);
        stop(&x, total)?;
    }
    Ok(Minimum { x, value: total, gradient_norm: residual, iterations, trace, converged: residual < tolerance })
}

/// `|g_k + c_k sign(x_k)|` on the support, `max(|g_k| - c_k, 0)` off it.
pub fn l1_residual(g: &DVector<f64>, x: &DVector<f64>, penalty: &[f64]) -> f64 {
    g.iter()
        .zip(x.iter())
        .zip(penalty)
        .map(|((gk, xk), c)| if *xk != 0.0 { (gk + c * xk.signum()).abs() } else { (gk.abs() - c).max(0.0) })
        .fold(0.0, f64::max)
}

/// Accelerated proximal gradient for `smooth(x) + sum_k penalty_k |x_k|`.
///
/// Uses backtracking on the Lipschitz estimate and gradient-based adaptive
/// restart. Convergence is measured by the sup-norm of the proximal
/// gradient mapping.
pub fn fista_l1<F, S>(
    mut smooth: F,
    penalty: &[f64],
    x0: DVector<f64>,
    tolerance: f64,
    max_iterations: usize,
    mut stop: S,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    S: FnMut(&DVector<f64>, f64) -> Result<()>,
{
    let l1 = |x: &DVector<f64>| x.iter().zip(penalty).map(|(v, c)| c * v.abs()).sum::<f64>();
    let prox = |v: &DVector<f64>, t: f64| {
        DVector::from_iterator(
            v.len(),
            v.iter().zip(penalty).map(|(vi, c)| {
                let thr = c * t;
                if vi.abs() <= thr {
                    0.0
                } else {
                    vi - thr * vi.signum()
                }
            }),
        )
    };

    let mut x = x0.clone();
    let mut y = x0;
    let mut momentum: f64 = 1.0;
    let mut lipschitz = 1.0;
    let (fx0, _) = smooth(&x)?;
    let mut total = fx0 + l1(&x);
    let mut trace = vec![total];
    let mut mapping_norm = f64::INFINITY;
    let mut iterations = 0;

    while iterations < max_iterations {
        let (fy, gy) = smooth(&y)?;
        let mut x_new;
        let mut f_new;
        loop {
            let t = 1.0 / lipschitz;
            x_new = prox(&(&y - t * &gy), t);
            let d = &x_new - &y;
            let (fx_new, _) = smooth(&x_new)?;
            f_new = fx_new;
            if f_new.is_finite() && f_new <= fy + gy.dot(&d) + 0.5 * lipschitz * d.norm_squared() + 1e-15 {
                break;
            }
            lipschitz *= 2.0;
            if lipschitz > 1e30 {
                break;
            }
        }
        mapping_norm = (&y - &x_new).amax() * lipschitz;
        let total_new = f_new + l1(&x_new);

        // restart when the step opposes the momentum direction
        let restart = (&y - &x_new).dot(&(&x_new - &x)) > 0.0 || total_new > total;
        let next_momentum = if restart {
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt())
        };
        if total_new <= total {
            y = if restart {
                x_new.clone()
            } else {
                &x_new + ((momentum - 1.0) / next_momentum) * (&x_new - &x)
            };
            x = x_new;
            total = total_new;
        } else {
            y = x.clone();
        }
        momentum = next_momentum;
        trace.push(total);
        iterations += 1;
        // allow the step size to grow back
        lipschitz = (lipschitz * 0.9).max(1e-12);
        stop(&x, total)?;
        if mapping_norm < tolerance {
            break;
        }
    }

    Ok(Minimum {
        x,
        value: total,
        gradient_norm: mapping_norm,
        iterations,
        trace,
        converged: mapping_norm < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        // f = (x0 - 1)^2 + 10 (x1 + 2)^2 + x0 x1
        let f = (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2) + x[0] * x[1];
        let g = DVector::from_vec(vec![2.0 * (x[0] - 1.0) + x[1], 20.0 * (x[1] + 2.0) + x[0]]);
        Ok((f, g))
    }

    #[test]
    fn bfgs_solves_quadratic() {
        let m = bfgs(quadratic, DVector::zeros(2), 1e-10, 200, |_, _| Ok(())).unwrap();
        assert!(m.converged);
        // grad = 0: [2 1; 1 20] x = [2; -40]
        let det = 40.0 - 1.0;
        let x0 = (2.0 * 20.0 + 40.0) / det;
        let x1 = (2.0 * -40.0 - 2.0) / det;
        assert!((m.x[0] - x0).abs() < 1e-9 && (m.x[1] - x1).abs() < 1e-9);
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fista_soft_thresholds() {
        // 0.5 (x - 3)^2 + 1 |x| -> x = 2 ; 0.5 (y - 0.5)^2 + 1 |y| -> y = 0
        let smooth = |x: &DVector<f64>| {
            Ok((
                0.5 * (x[0] - 3.0).powi(2) + 0.5 * (x[1] - 0.5).powi(2),
                DVector::from_vec(vec![x[0] - 3.0, x[1] - 0.5]),
            ))
        };
        let m = fista_l1(smooth, &[1.0, 1.0], DVector::zeros(2), 1e-12, 1000, |_, _| Ok(())).unwrap();
        assert!(m.converged);
        assert!((m.x[0] - 2.0).abs() < 1e-10);
        assert_eq!(m.x[1], 0.0);
    }
}
