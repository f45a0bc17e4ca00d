//! Broadcasted nonparametric dose-response regression.
//!
//! The model applies one spline-expanded univariate map to every entry of
//! the treatment matrix and combines entries through a rank-`R` CP
//! coefficient tensor:
//!
//! `s(T) = c + (1/pq) sum_r sum_{i,j} b1_r[i] b2_r[j] <alpha_r, phi(T_ij)>`
//!
//! where `phi` is the truncated power basis without its constant term.
//! Fitting is block-wise exact least squares over `{c, alpha}`, `{b1}`,
//! `{b2}`, rescaling factor vectors to unit norm after each cycle.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub order: usize,
    /// Strictly increasing interior knots in `(0, 1)`.
    pub knots: Vec<f64>,
}

impl SplineSpec {
    pub fn new(order: usize, knots: Vec<f64>) -> Result<Self> {
        let s = Self { order, knots };
        s.validate()?;
        Ok(s)
    }

    /// Order `order`, basis dimension `dimension`, equally spaced interior
    /// knots.
    pub fn equally_spaced(order: usize, dimension: usize) -> Result<Self> {
        if dimension < order {
            return Err(Error::Parameter(format!(
                "basis dimension {dimension} is below the spline order {order}"
            )));
        }
        let m = dimension - order;
        Self::new(order, (1..=m).map(|j| j as f64 / (m + 1) as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 2 {
            return Err(Error::Parameter(format!("spline order must be >= 2, got {}", self.order)));
        }
        if self.knots.iter().any(|k| !(*k > 0.0 && *k < 1.0)) {
            return Err(Error::Parameter("interior knots must lie in (0, 1)".into()));
        }
        if self.knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter("interior knots must be strictly increasing".into()));
        }
        Ok(())
    }

    /// `D = order + #knots`.
    pub fn dimension(&self) -> usize {
        self.order + self.knots.len()
    }

    /// Number of non-constant basis functions, `D - 1`.
    pub fn free_dimension(&self) -> usize {
        self.dimension() - 1
    }

    fn eval_into(&self, x: f64, out: &mut [f64]) {
        let mut power = 1.0;
        for slot in out.iter_mut().take(self.order - 1) {
            power *= x;
            *slot = power;
        }
        let deg = (self.order - 1) as i32;
        for (slot, k) in out[self.order - 1..].iter_mut().zip(&self.knots) {
            *slot = if x > *k { (x - k).powi(deg) } else { 0.0 };
        }
    }
}

impl Default for SplineSpec {
    fn default() -> Self {
        Self::equally_spaced(4, 8).expect("valid default spline")
    }
}

/// `(x, ..., x^{order-1}, (x - k_1)_+^{order-1}, ...)` for `x` in `[0, 1]`.
pub fn truncated_basis_eval(spec: &SplineSpec, x: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain { value: x });
    }
    let mut out = vec![0.0; spec.free_dimension()];
    spec.eval_into(x, &mut out);
    Ok(out)
}

/// One affine map `u = (t - offset) / scale` shared by every treatment
/// entry, so the broadcast function acts on a common scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub offset: f64,
    pub scale: f64,
}

impl InputScaling {
    pub fn from_training(values: impl Iterator<Item = f64>) -> Result<Self> {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Input("treatment entries are constant or not finite".into()));
        }
        Ok(Self { offset: lo, scale: hi - lo })
    }

    /// Scaled value and whether it had to be clamped into `[0, 1]`.
    pub fn apply(&self, t: f64) -> (f64, bool) {
        let u = (t - self.offset) / self.scale;
        if u < 0.0 {
            (0.0, true)
        } else if u > 1.0 {
            (1.0, true)
        } else {
            (u, false)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    /// Regress `w_i Y_i` on the model with unit observation weights.
    #[default]
    Transformed,
    /// Minimize `sum_i w_i (Y_i - s(T_i))^2`.
    WeightedResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BroadcastOptions {
    /// Relative objective decrease below which cycling stops.
    pub tol: f64,
    pub max_cycles: usize,
    pub ridge: f64,
    pub restarts: usize,
    pub seed: u64,
    pub response: ResponseMode,
}

impl Default for BroadcastOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_cycles: 200, ridge: 1e-8, restarts: 5, seed: 0, response: ResponseMode::Transformed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    /// Objective after initialization and after every cycle.
    pub objective_trace: Vec<f64>,
    pub cycles: usize,
    pub converged: bool,
    /// Some block solve needed the ridge fallback.
    pub ridge_used: bool,
    /// Final objective of each restart; the best one was kept.
    pub restart_objectives: Vec<f64>,
    /// Entries clamped into `[0, 1]` when computing `fitted_values`.
    pub clamped_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpModel {
    pub c: f64,
    #[serde(rename = "R")]
    pub rank: usize,
    pub p: usize,
    pub q: usize,
    pub spline: SplineSpec,
    /// `R` rows of length `p`, unit norm.
    #[serde(with = "rows")]
    pub factors_rows: DMatrix<f64>,
    /// `R` rows of length `q`, unit norm.
    #[serde(with = "rows")]
    pub factors_cols: DMatrix<f64>,
    /// `R` rows of length `D - 1`.
    #[serde(with = "rows")]
    pub spline_coeffs: DMatrix<f64>,
    pub input_scaling: InputScaling,
    pub fitted_values: Vec<f64>,
    pub fit: FitInfo,
}

mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

impl CpModel {
    /// Prediction at a raw (unscaled) `p x q` treatment. Scaled entries are
    /// clamped into `[0, 1]`.
    pub fn predict(&self, t: &DMatrix<f64>) -> Result<f64> {
        Ok(self.predict_counting(t)?.0)
    }

    /// Prediction plus the number of entries that were clamped.
    pub fn predict_counting(&self, t: &DMatrix<f64>) -> Result<(f64, usize)> {
        if t.shape() != (self.p, self.q) {
            return Err(Error::Input(format!(
                "treatment has shape {:?}, model expects {:?}",
                t.shape(),
                (self.p, self.q)
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("treatment is not finite".into()));
        }
        let m = self.spline.free_dimension();
        let mut phi = vec![0.0; m];
        let mut clamped = 0;
        let mut s = 0.0;
        for j in 0..self.q {
            for i in 0..self.p {
                let (u, c) = self.input_scaling.apply(t[(i, j)]);
                clamped += c as usize;
                self.spline.eval_into(u, &mut phi);
                for r in 0..self.rank {
                    let g: f64 = (0..m).map(|d| self.spline_coeffs[(r, d)] * phi[d]).sum();
                    s += self.factors_rows[(r, i)] * self.factors_cols[(r, j)] * g;
                }
            }
        }
        Ok((self.c + s / (self.p * self.q) as f64, clamped))
    }
}

/// Spline features of every scaled treatment entry:
/// `values[(i * pq + e) * m + d] = phi_d(u(T_i,e))` with `e` column-major.
struct Features {
    n: usize,
    p: usize,
    q: usize,
    m: usize,
    values: Vec<f64>,
}

impl Features {
    fn new(data: &Dataset, spec: &SplineSpec, scaling: &InputScaling) -> (Self, usize) {
        let (n, p, q) = (data.n(), data.p(), data.q());
        let pq = p * q;
        let m = spec.free_dimension();
        let mut values = vec![0.0; n * pq * m];
        let mut clamped = 0;
        for i in 0..n {
            for e in 0..pq {
                let (u, c) = scaling.apply(data.treatments()[(i, e)]);
                clamped += c as usize;
                let at = (i * pq + e) * m;
                spec.eval_into(u, &mut values[at..at + m]);
            }
        }
        (Self { n, p, q, m, values }, clamped)
    }

    fn at(&self, i: usize, e: usize) -> &[f64] {
        let at = (i * self.p * self.q + e) * self.m;
        &self.values[at..at + self.m]
    }
}

#[derive(Clone)]
struct Params {
    c: f64,
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
    alpha: DMatrix<f64>,
}

struct Problem<'a> {
    f: &'a Features,
    z: DVector<f64>,
    v: DVector<f64>,
    rank: usize,
    ridge: f64,
}

impl Problem<'_> {
    fn scale(&self) -> f64 {
        1.0 / (self.f.p * self.f.q) as f64
    }

    /// `psi[(i * pq + e) * R + r] = <alpha_r, phi(T_i,e)>`
    fn psi(&self, alpha: &DMatrix<f64>) -> Vec<f64> {
        let (n, pq, m, rank) = (self.f.n, self.f.p * self.f.q, self.f.m, self.rank);
        let mut out = vec![0.0; n * pq * rank];
        for i in 0..n {
            for e in 0..pq {
                let phi = self.f.at(i, e);
                for r in 0..rank {
                    out[(i * pq + e) * rank + r] = (0..m).map(|d| alpha[(r, d)] * phi[d]).sum();
                }
            }
        }
        out
    }

    fn predictions(&self, x: &Params) -> DVector<f64> {
        let (n, p, q, rank) = (self.f.n, self.f.p, self.f.q, self.rank);
        let psi = self.psi(&x.alpha);
        let s = self.scale();
        DVector::from_fn(n, |i, _| {
            let mut acc = 0.0;
            for e in 0..p * q {
                let (r1, c1) = (e % p, e / p);
                for r in 0..rank {
                    acc += x.b1[(r, r1)] * x.b2[(r, c1)] * psi[(i * p * q + e) * rank + r];
                }
            }
            x.c + s * acc
        })
    }

    fn objective(&self, x: &Params) -> f64 {
        let resid = &self.z - self.predictions(x);
        resid.iter().zip(self.v.iter()).map(|(r, v)| v * r * r).sum()
    }

    /// Weighted least squares with a ridge fallback for rank deficiency.
    fn least_squares(&self, design: &DMatrix<f64>, target: &DVector<f64>) -> (DVector<f64>, bool) {
        let mut scaled = design.clone();
        let mut t = target.clone();
        for i in 0..design.nrows() {
            let s = self.v[i].sqrt();
            scaled.row_mut(i).scale_mut(s);
            t[i] *= s;
        }
        let mut gram = scaled.tr_mul(&scaled);
        let rhs = scaled.tr_mul(&t);
        let k = gram.nrows();
        let diag_max = gram.diagonal().amax().max(f64::MIN_POSITIVE);
        if let Some(ch) = gram.clone().cholesky() {
            let l_min = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
            if l_min * l_min > 1e-13 * diag_max {
                return (ch.solve(&rhs), false);
            }
        }
        for j in 0..k {
            gram[(j, j)] += self.ridge * diag_max.max(1.0);
        }
        match gram.cholesky() {
            Some(ch) => (ch.solve(&rhs), true),
            None => (DVector::zeros(k), true),
        }
    }

    /// Exact update of `{c, alpha}`.
    fn update_alpha(&self, x: &mut Params) -> bool {
        let (n, p, q, m, rank) = (self.f.n, self.f.p, self.f.q, self.f.m, self.rank);
        let s = self.scale();
        let mut design = DMatrix::zeros(n, 1 + rank * m);
        for i in 0..n {
            design[(i, 0)] = 1.0;
            for e in 0..p * q {
                let phi = self.f.at(i, e);
                for r in 0..rank {
                    let g = s * x.b1[(r, e % p)] * x.b2[(r, e / p)];
                    for d in 0..m {
                        design[(i, 1 + r * m + d)] += g * phi[d];
                    }
                }
            }
        }
        let (sol, ridged) = self.least_squares(&design, &self.z);
        x.c = sol[0];
        for r in 0..rank {
            for d in 0..m {
                x.alpha[(r, d)] = sol[1 + r * m + d];
            }
        }
        ridged
    }

    /// Exact update of the row factors (`rows = true`) or column factors.
    fn update_factor(&self, x: &mut Params, rows: bool) -> bool {
        let (n, p, q, rank) = (self.f.n, self.f.p, self.f.q, self.rank);
        let s = self.scale();
        let psi = self.psi(&x.alpha);
        let len = if rows { p } else { q };
        let mut design = DMatrix::zeros(n, rank * len);
        for i in 0..n {
            for e in 0..p * q {
                let (r1, c1) = (e % p, e / p);
                for r in 0..rank {
                    let v = psi[(i * p * q + e) * rank + r];
                    if rows {
                        design[(i, r * len + r1)] += s * x.b2[(r, c1)] * v;
                    } else {
                        design[(i, r * len + c1)] += s * x.b1[(r, r1)] * v;
                    }
                }
            }
        }
        let target = self.z.add_scalar(-x.c);
        let (sol, ridged) = self.least_squares(&design, &target);
        let dest = if rows { &mut x.b1 } else { &mut x.b2 };
        for r in 0..rank {
            for j in 0..len {
                dest[(r, j)] = sol[r * len + j];
            }
        }
        ridged
    }
}

/// Unit-norm factor rows with first nonzero entry positive; magnitudes and
/// signs move into `alpha`. Leaves the model unchanged.
fn normalize(x: &mut Params) {
    for r in 0..x.alpha.nrows() {
        let mut gain = 1.0;
        for f in [&mut x.b1, &mut x.b2] {
            let norm = f.row(r).norm();
            if norm > 0.0 {
                let first = f.row(r).iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
                let sign = first.signum();
                f.row_mut(r).scale_mut(sign / norm);
                gain *= sign * norm;
            }
        }
        x.alpha.row_mut(r).scale_mut(gain);
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, rank: usize, len: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rank, len, |_, _| StandardNormal.sample(rng));
    for r in 0..rank {
        let norm = m.row(r).norm();
        m.row_mut(r).scale_mut(1.0 / norm);
    }
    m
}

/// Starting factors from a CP decomposition of the unstructured
/// least-squares coefficient tensor `G` (`p x q x m`).
fn cp_start(problem: &Problem, rng: &mut ChaCha8Rng) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, p, q, m, rank) = (problem.f.n, problem.f.p, problem.f.q, problem.f.m, problem.rank);
    let k = 1 + p * q * m;
    if n <= k {
        return None;
    }
    let s = problem.scale();
    let design = DMatrix::from_fn(n, k, |i, col| {
        if col == 0 {
            1.0
        } else {
            let (e, d) = ((col - 1) / m, (col - 1) % m);
            s * problem.f.at(i, e)[d]
        }
    });
    let (g, _) = problem.least_squares(&design, &problem.z);
    let tensor = |i: usize, j: usize, d: usize| g[1 + (j * p + i) * m + d];

    let mut a = random_unit_rows(rng, rank, p).transpose();
    let mut b = random_unit_rows(rng, rank, q).transpose();
    let mut c = random_unit_rows(rng, rank, m).transpose();
    for _ in 0..50 {
        for mode in 0..3 {
            let (len, u, w) = match mode {
                0 => (p, &b, &c),
                1 => (q, &a, &c),
                _ => (m, &a, &b),
            };
            let gram = (u.tr_mul(u)).component_mul(&w.tr_mul(w)) + DMatrix::identity(rank, rank) * 1e-10;
            let mut mttkrp = DMatrix::<f64>::zeros(len, rank);
            for i in 0..p {
                for j in 0..q {
                    for d in 0..m {
                        let v = tensor(i, j, d);
                        for r in 0..rank {
                            match mode {
                                0 => mttkrp[(i, r)] += v * b[(j, r)] * c[(d, r)],
                                1 => mttkrp[(j, r)] += v * a[(i, r)] * c[(d, r)],
                                _ => mttkrp[(d, r)] += v * a[(i, r)] * b[(j, r)],
                            }
                        }
                    }
                }
            }
            let inv = gram.cholesky()?.inverse();
            let updated = mttkrp * inv;
            match mode {
                0 => a = updated,
                1 => b = updated,
                _ => c = updated,
            }
        }
    }
    let (b1, b2) = (a.transpose(), b.transpose());
    if b1.iter().chain(b2.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    Some((b1, b2))
}

fn run_restart(problem: &Problem, start: (DMatrix<f64>, DMatrix<f64>), opts: &BroadcastOptions) -> (Params, FitInfo) {
    let (rank, m) = (problem.rank, problem.f.m);
    let mut x = Params { c: 0.0, b1: start.0, b2: start.1, alpha: DMatrix::zeros(rank, m) };
    // zero rows would make the alpha block singular
    for f in [&mut x.b1, &mut x.b2] {
        for r in 0..rank {
            if f.row(r).norm() == 0.0 {
                f.row_mut(r).fill(1.0);
            }
        }
    }
    normalize(&mut x);
    let mut ridge_used = problem.update_alpha(&mut x);
    let mut current = problem.objective(&x);
    let mut trace = vec![current];
    let mut converged = false;
    let mut cycles = 0;
    while cycles < opts.max_cycles {
        let before = current;
        for block in 0..3 {
            let mut trial = x.clone();
            let ridged = match block {
                0 => problem.update_factor(&mut trial, true),
                1 => problem.update_factor(&mut trial, false),
                _ => problem.update_alpha(&mut trial),
            };
            let value = problem.objective(&trial);
            // rounding can push an exact update a hair uphill; keep the old
            // block then
            if value <= current {
                x = trial;
                current = value;
                ridge_used |= ridged;
            }
        }
        normalize(&mut x);
        cycles += 1;
        trace.push(current);
        if before - current <= opts.tol * before.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    let info = FitInfo {
        objective_trace: trace,
        cycles,
        converged,
        ridge_used,
        restart_objectives: Vec::new(),
        clamped_entries: 0,
    };
    (x, info)
}

/// Fits the broadcasted CP model by block-wise least squares with
/// `opts.restarts` starting points (the first from the unstructured fit
/// when `n` allows it), keeping the best final objective.
pub fn fit_broadcasted(
    data: &Dataset,
    weights: &DVector<f64>,
    rank: usize,
    spec: &SplineSpec,
    opts: &BroadcastOptions,
) -> Result<CpModel> {
    spec.validate()?;
    if rank == 0 {
        return Err(Error::Parameter("rank must be >= 1".into()));
    }
    if opts.restarts == 0 || opts.max_cycles == 0 {
        return Err(Error::Parameter("restarts and max_cycles must be >= 1".into()));
    }
    if !(opts.tol >= 0.0) || !(opts.ridge > 0.0) {
        return Err(Error::Parameter("tol must be >= 0 and ridge > 0".into()));
    }
    let (n, p, q) = (data.n(), data.p(), data.q());
    if n <= rank * (p + q + spec.dimension()) {
        return Err(Error::Parameter(format!(
            "n = {n} leaves no headroom for rank {rank} with p + q + D = {}",
            p + q + spec.dimension()
        )));
    }
    if weights.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: weights.len() });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Input("weights must be finite and >= 0".into()));
    }
    if !data.is_finite() {
        return Err(Error::Input("dataset contains non-finite values".into()));
    }

    let scaling = InputScaling::from_training(data.treatments().iter().copied())?;
    let (features, clamped) = Features::new(data, spec, &scaling);
    let (z, v) = match opts.response {
        ResponseMode::Transformed => (data.outcomes().component_mul(weights), DVector::from_element(n, 1.0)),
        ResponseMode::WeightedResidual => (data.outcomes().clone(), weights.clone()),
    };
    let problem = Problem { f: &features, z, v, rank, ridge: opts.ridge };

    let runs: Vec<(Params, FitInfo)> = (0..opts.restarts)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64);
            let start = if k == 0 { cp_start(&problem, &mut rng) } else { None };
            let start = start.unwrap_or_else(|| (random_unit_rows(&mut rng, rank, p), random_unit_rows(&mut rng, rank, q)));
            run_restart(&problem, start, opts)
        })
        .collect();
    let restart_objectives: Vec<f64> = runs.iter().map(|(_, i)| *i.objective_trace.last().unwrap()).collect();
    let best = restart_objectives
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap();
    let (x, mut info) = runs.into_iter().nth(best).unwrap();
    info.restart_objectives = restart_objectives;
    info.clamped_entries = clamped;
    let mut model = CpModel {
        c: x.c,
        rank,
        p,
        q,
        spline: spec.clone(),
        factors_rows: x.b1,
        factors_cols: x.b2,
        spline_coeffs: x.alpha,
        input_scaling: scaling,
        fitted_values: Vec::new(),
        fit: info,
    };
    model.fitted_values = (0..n).map(|i| model.predict(&data.treatment(i))).collect::<Result<_>>()?;
    Ok(model)
}
