//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Solution of `min sum p log(n p)` over the simplex subject to
/// `||M' p||^2 <= delta`, found directly in the primal.
pub struct PrimalSolution {
    /// `n p`, mean one.
    pub weights: DVector<f64>,
    /// `sum p log(n p)`
    pub kl: f64,
}

fn kl(p: &DVector<f64>) -> f64 {
    let n = p.len() as f64;
    p.iter().map(|v| if *v > 0.0 { v * (n * v).ln() } else { 0.0 }).sum()
}

/// Minimizes `KL(p) + mu ||M' p||^2` on the simplex by equality-constrained
/// Newton with a positivity-preserving backtrack.
fn penalized(m: &DMatrix<f64>, mu: f64, start: &DVector<f64>) -> DVector<f64> {
    let n = m.nrows();
    let f = |p: &DVector<f64>| kl(p) + mu * (m.tr_mul(p)).norm_squared();
    let mut p = start.clone();
    for _ in 0..200 {
        let a = m.tr_mul(&p);
        let g = p.map(|v| (n as f64 * v).ln() + 1.0) + (m * &a) * (2.0 * mu);
        let mut kkt = DMatrix::zeros(n + 1, n + 1);
        let mut h = m * m.transpose() * (2.0 * mu);
        for i in 0..n {
            h[(i, i)] += 1.0 / p[i];
        }
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        for i in 0..n {
            kkt[(i, n)] = 1.0;
            kkt[(n, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-&g));
        let sol = kkt.lu().solve(&rhs).expect("KKT system is nonsingular");
        let d = sol.rows(0, n).into_owned();
        let decrement = -g.dot(&d);
        if decrement < 1e-30 {
            break;
        }
        let mut step = 1.0;
        while (0..n).any(|i| p[i] + step * d[i] <= 0.0) {
            step *= 0.5;
        }
        let f0 = f(&p);
        while f(&(&p + &d * step)) > f0 - 1e-4 * step * decrement && step > 1e-20 {
            step *= 0.5;
        }
        p += &d * step;
        let s = p.sum();
        p /= s;
    }
    p
}

/// Bisects the constraint multiplier until the penalized minimizer sits on
/// the constraint boundary.
pub fn primal_oracle(m: &DMatrix<f64>, delta: f64) -> PrimalSolution {
    let n = m.nrows();
    let uniform = DVector::from_element(n, 1.0 / n as f64);
    let viol = |p: &DVector<f64>| m.tr_mul(p).norm_squared() - delta;
    if viol(&uniform) <= 0.0 {
        return PrimalSolution { weights: uniform * n as f64, kl: 0.0 };
    }
    let mut hi = 1.0;
    let mut p_hi = penalized(m, hi, &uniform);
    while viol(&p_hi) > 0.0 {
        hi *= 2.0;
        p_hi = penalized(m, hi, &p_hi);
        assert!(hi < 1e12, "primal oracle: constraint unreachable");
    }
    let mut lo = 0.0;
    let mut p = p_hi.clone();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        p = penalized(m, mid, &p);
        if viol(&p) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            p_hi = p.clone();
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    PrimalSolution { kl: kl(&p_hi), weights: p_hi * n as f64 }
}

/// Random `n x k` system `Z - 1 (Z' p0)'` for a random interior `p0`, so an
/// exactly balancing positive weight vector exists.
pub fn feasible_system(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let p0 = DVector::from_iterator(n, raw.iter().map(|v| v / total));
    let centre = z.tr_mul(&p0);
    DMatrix::from_fn(n, k, |i, j| z[(i, j)] - centre[j])
}

/// Cox-de Boor B-spline basis of the given order on `[0, 1]` with clamped
/// boundary knots; returns all `order + interior.len()` values at `x`.
pub fn bspline_basis(order: usize, interior: &[f64], x: f64) -> Vec<f64> {
    let mut t = vec![0.0; order];
    t.extend_from_slice(interior);
    t.extend(std::iter::repeat(1.0).take(order));
    let dim = order + interior.len();
    // degree-0 indicators; the last non-empty span is closed on the right
    let spans = t.len() - 1;
    let last = (0..spans).rev().find(|&j| t[j] < t[j + 1]).unwrap();
    let mut b: Vec<f64> = (0..spans)
        .map(|j| {
            let inside = t[j] <= x && x < t[j + 1];
            let right_end = j == last && x == t[j + 1];
            if inside || right_end { 1.0 } else { 0.0 }
        })
        .collect();
    for k in 1..order {
        let mut next = vec![0.0; spans - k];
        for j in 0..spans - k {
            let mut v = 0.0;
            if t[j + k] > t[j] {
                v += (x - t[j]) / (t[j + k] - t[j]) * b[j];
            }
            if t[j + k + 1] > t[j + 1] {
                v += (t[j + k + 1] - x) / (t[j + k + 1] - t[j + 1]) * b[j + 1];
            }
            next[j] = v;
        }
        b = next;
    }
    b.truncate(dim);
    b
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
