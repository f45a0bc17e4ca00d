//! The six simulation designs: equicorrelated Gaussian covariates, a linear
//! Gaussian treatment-assignment model, and scenario-specific outcomes.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::CovariateBasis;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const COVARIATE_CORRELATION: f64 = 0.2;
pub const OUTCOME_NOISE_SD: f64 = 2.0;
pub const TREATMENT_NOISE_SD: f64 = 1.0;

/// `B = [[1, 0], [0, 1], [1, 1]]`, used both as the effect matrix and as
/// every assignment matrix `B_j`.
pub fn reference_b() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])
}

/// `f1(t) = t + 0.6 sin(2 pi (t - 0.5)^2)`
pub fn f1(t: f64) -> f64 {
    t + 0.6 * (2.0 * std::f64::consts::PI * (t - 0.5).powi(2)).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confounding {
    /// `X1 + (X2 + 1)^2 + X4^2`
    Squares,
    /// `X2 + X3 + sum_{j<k<=5} Xj Xk`
    Interactions,
    /// `X1 + ... + X5`
    Linear,
}

impl Confounding {
    fn eval(self, x: &[f64]) -> f64 {
        match self {
            Confounding::Squares => x[0] + (x[1] + 1.0).powi(2) + x[3].powi(2),
            Confounding::Interactions => {
                let mut s = x[1] + x[2];
                for j in 0..5 {
                    for k in j + 1..5 {
                        s += x[j] * x[k];
                    }
                }
                s
            }
            Confounding::Linear => x[..5].iter().sum(),
        }
    }

    /// Population mean of the confounding term.
    pub fn mean(self) -> f64 {
        match self {
            Confounding::Squares => 3.0,
            Confounding::Interactions => 10.0 * COVARIATE_CORRELATION,
            Confounding::Linear => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub scenario_id: u8,
    pub true_b: DMatrix<f64>,
    /// `B_j` for the covariates that drive the treatment, `X_1 .. X_m`.
    pub dgp_matrices: Vec<DMatrix<f64>>,
    pub treatment_noise_sd: f64,
    pub outcome_noise_sd: f64,
    /// Whether the effect passes through `f1` entrywise.
    pub f1: bool,
    pub confounding: Confounding,
    pub covariate_dim: usize,
    pub covariate_correlation: f64,
}

impl ScenarioTruth {
    pub fn new(id: u8) -> Result<Self> {
        let (m, f1, confounding, l) = match id {
            1 => (3, false, Confounding::Squares, 5),
            2 => (3, false, Confounding::Interactions, 5),
            3 => (3, true, Confounding::Squares, 5),
            4 => (3, true, Confounding::Interactions, 5),
            5 => (5, false, Confounding::Linear, 49),
            6 => (5, false, Confounding::Linear, 99),
            _ => return Err(Error::Parameter(format!("scenario id must be 1..=6, got {id}"))),
        };
        Ok(Self {
            scenario_id: id,
            true_b: reference_b(),
            dgp_matrices: vec![reference_b(); m],
            treatment_noise_sd: TREATMENT_NOISE_SD,
            outcome_noise_sd: OUTCOME_NOISE_SD,
            f1,
            confounding,
            covariate_dim: l,
            covariate_correlation: COVARIATE_CORRELATION,
        })
    }

    pub fn p(&self) -> usize {
        self.true_b.nrows()
    }

    pub fn q(&self) -> usize {
        self.true_b.ncols()
    }

    /// The covariate basis used for this scenario's balancing constraints.
    pub fn covariate_basis(&self) -> CovariateBasis {
        match (self.scenario_id, self.confounding) {
            (5 | 6, _) => CovariateBasis::Linear,
            (_, Confounding::Interactions) => CovariateBasis::LinearPlusInteractions,
            _ => CovariateBasis::LinearPlusSquares,
        }
    }

    pub fn is_linear(&self) -> bool {
        !self.f1
    }

    /// `<B, F(T)>` with `F` the identity or entrywise `f1`.
    pub fn effect(&self, t: &DMatrix<f64>) -> f64 {
        t.iter()
            .zip(self.true_b.iter())
            .map(|(v, b)| b * if self.f1 { f1(*v) } else { *v })
            .sum()
    }

    /// Average potential outcome `E[Y(t)]`: the causal dose-response surface.
    pub fn dose_response(&self, t: &DMatrix<f64>) -> f64 {
        1.0 + self.effect(t) + self.confounding.mean()
    }

    /// `A`, the `pq x m` matrix with columns `vec(B_j)`.
    pub fn assignment_matrix(&self) -> DMatrix<f64> {
        let pq = self.p() * self.q();
        DMatrix::from_fn(pq, self.dgp_matrices.len(), |r, c| self.dgp_matrices[c][r])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Zero out both the treatment error `E_i` and the outcome noise.
    pub noiseless: bool,
}

/// Equicorrelated standard normal covariates: `X_j = a Z_j + b Z_0`.
pub(crate) fn draw_covariates(rng: &mut ChaCha8Rng, n: usize, l: usize, rho: f64) -> DMatrix<f64> {
    let a = (1.0 - rho).sqrt();
    let b = rho.sqrt();
    let mut x = DMatrix::zeros(n, l);
    for i in 0..n {
        let common: f64 = StandardNormal.sample(rng);
        for j in 0..l {
            let z: f64 = StandardNormal.sample(rng);
            x[(i, j)] = a * z + b * common;
        }
    }
    x
}

pub fn generate_scenario(id: u8, n: usize, seed: u64) -> Result<(Dataset, ScenarioTruth)> {
    generate_scenario_with(id, n, seed, GenerateOptions::default())
}

pub fn generate_scenario_with(
    id: u8,
    n: usize,
    seed: u64,
    opts: GenerateOptions,
) -> Result<(Dataset, ScenarioTruth)> {
    let truth = ScenarioTruth::new(id)?;
    let data = generate_from_truth(&truth, n, seed, opts)?;
    Ok((data, truth))
}

/// Draws a dataset from an arbitrary (possibly modified) truth.
pub fn generate_from_truth(truth: &ScenarioTruth, n: usize, seed: u64, opts: GenerateOptions) -> Result<Dataset> {
    if truth.dgp_matrices.len() > truth.covariate_dim {
        return Err(Error::Parameter("assignment uses more covariates than exist".into()));
    }
    if n < 10 {
        return Err(Error::Parameter(format!("scenario sample size must be >= 10, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, q) = (truth.p(), truth.q());
    let pq = p * q;
    let x = draw_covariates(&mut rng, n, truth.covariate_dim, truth.covariate_correlation);
    let a = truth.assignment_matrix();
    let m = truth.dgp_matrices.len();

    let mut t = DMatrix::zeros(n, pq);
    let mut y = DVector::zeros(n);
    let mut row = vec![0.0; truth.covariate_dim];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = x[(i, j)];
        }
        for c in 0..pq {
            let mean: f64 = (0..m).map(|j| a[(c, j)] * row[j]).sum();
            let e: f64 = StandardNormal.sample(&mut rng);
            t[(i, c)] = mean + if opts.noiseless { 0.0 } else { truth.treatment_noise_sd * e };
        }
        let ti = DMatrix::from_iterator(p, q, t.row(i).iter().copied());
        let eps: f64 = StandardNormal.sample(&mut rng);
        y[i] = 1.0
            + truth.effect(&ti)
            + truth.confounding.eval(&row)
            + if opts.noiseless { 0.0 } else { truth.outcome_noise_sd * eps };
    }
    Dataset::new(p, q, t, x, y)
}
