//! The balancing-constraint matrix shared by every weighting method.
//!
//! Raw moment column `k = l2 * K1 + l1` is `u_{l1}(T_i) * v_{l2}(X_i)`. Its
//! balance target is the product of marginal means `ubar_{l1} * vbar_{l2}`,
//! so a weight vector balances column `k` when
//! `(1/n) sum_i w_i (u_{l1}(T_i) v_{l2}(X_i) - ubar_{l1} vbar_{l2}) = 0`.
//! Columns are then scaled by `lambda_k = 1 / sigma_k`, the inverse sample
//! standard deviation (denominator `n - 1`) of the raw product column.
//!
//! Columns whose treatment or covariate factor is the constant basis
//! function have a target equal to their own sample mean, so they come out
//! exactly centered. Cross columns do not: their unweighted mean is the
//! scaled sample covariance of the two factors, which is precisely the
//! imbalance the weights must remove.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Columns with a raw standard deviation at or below this are dropped.
pub const DEGENERATE_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSystem {
    matrix: DMatrix<f64>,
    lambda: Vec<f64>,
    targets: Vec<f64>,
    sigmas: Vec<f64>,
    kept_columns: Vec<usize>,
    dropped_columns: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    k1: usize,
    k2: usize,
}

impl MomentSystem {
    /// Wraps an already scaled constraint matrix (unit `lambda`, zero targets).
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let k = matrix.ncols();
        if k == 0 {
            return Err(Error::EmptySystem);
        }
        if matrix.nrows() < 2 {
            return Err(Error::Input("moment system needs at least 2 rows".into()));
        }
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            let n = matrix.nrows();
            return Err(Error::NonFiniteBasis { observation: pos % n, column: pos / n });
        }
        Ok(Self {
            matrix,
            lambda: vec![1.0; k],
            targets: vec![0.0; k],
            sigmas: vec![1.0; k],
            kept_columns: (0..k).collect(),
            dropped_columns: Vec::new(),
            pairs: (0..k).map(|c| (c, 0)).collect(),
            k1: k,
            k2: 1,
        })
    }

    /// `M~`, an `n x K_effective` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn k_effective(&self) -> usize {
        self.matrix.ncols()
    }

    /// Number of raw columns before degenerate ones were dropped.
    pub fn k_raw(&self) -> usize {
        self.k1 * self.k2
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Balance targets `ubar_l * vbar_l~` of the retained columns.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Raw column indices retained, ascending.
    pub fn kept_columns(&self) -> &[usize] {
        &self.kept_columns
    }

    pub fn dropped_columns(&self) -> &[usize] {
        &self.dropped_columns
    }

    /// `(treatment basis index, covariate basis index)` for each retained column.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Per-column weighted mean imbalance `(1/n) M~^T w`.
    pub fn imbalance(&self, weights: &DVector<f64>) -> Result<DVector<f64>> {
        if weights.len() != self.n() {
            return Err(Error::LengthMismatch { expected: self.n(), got: weights.len() });
        }
        Ok(self.matrix.tr_mul(weights) / self.n() as f64)
    }
}

/// Builds `M~` from a dataset and a basis choice.
pub fn build_moment_system(data: &Dataset, spec: &BasisSpec) -> Result<MomentSystem> {
    let u = spec.treatment_values(data);
    let v = spec.covariate_values(data)?;
    let n = data.n();
    let (k1, k2) = (u.ncols(), v.ncols());
    let nf = n as f64;

    let ubar: Vec<f64> = (0..k1).map(|l| u.column(l).sum() / nf).collect();
    let vbar: Vec<f64> = (0..k2).map(|l| v.column(l).sum() / nf).collect();

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut lambda = Vec::new();
    let mut targets = Vec::new();
    let mut sigmas = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut pairs = Vec::new();

    let mut raw = vec![0.0; n];
    for l2 in 0..k2 {
        for l1 in 0..k1 {
            let k = l2 * k1 + l1;
            for (i, r) in raw.iter_mut().enumerate() {
                *r = u[(i, l1)] * v[(i, l2)];
                if !r.is_finite() {
                    return Err(Error::NonFiniteBasis { observation: i, column: k });
                }
            }
            let mean = raw.iter().sum::<f64>() / nf;
            let var = raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let sigma = var.sqrt();
            if sigma <= DEGENERATE_SIGMA {
                dropped.push(k);
                continue;
            }
            let target = ubar[l1] * vbar[l2];
            let lam = 1.0 / sigma;
            columns.push(raw.iter().map(|r| lam * (r - target)).collect());
            lambda.push(lam);
            targets.push(target);
            sigmas.push(sigma);
            kept.push(k);
            pairs.push((l1, l2));
        }
    }
    if columns.is_empty() {
        return Err(Error::EmptySystem);
    }
    let matrix = DMatrix::from_fn(n, columns.len(), |i, c| columns[c][i]);
    Ok(MomentSystem {
        matrix,
        lambda,
        targets,
        sigmas,
        kept_columns: kept,
        dropped_columns: dropped,
        pairs,
        k1,
        k2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::CovariateBasis;

    fn two_point() -> Dataset {
        Dataset::new(
            1,
            1,
            DMatrix::from_column_slice(2, 1, &[0.0, 2.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 2.0]),
            DVector::zeros(2),
        )
        .unwrap()
    }

    #[test]
    fn two_point_centering_and_scaling() {
        let ms = build_moment_system(&two_point(), &BasisSpec::new(CovariateBasis::Linear)).unwrap();
        // u = (1, T), v = (1, X): columns k = 0 (1*1), 1 (T*1), 2 (1*X), 3 (T*X)
        assert_eq!(ms.k_raw(), 4);
        assert_eq!(ms.dropped_columns(), &[0]);
        assert_eq!(ms.kept_columns(), &[1, 2, 3]);
        let s = 2f64.sqrt();
        let t_col = ms.matrix().column(0);
        assert!((t_col[0] + 1.0 / s).abs() < 1e-15);
        assert!((t_col[1] - 1.0 / s).abs() < 1e-15);
        assert!((ms.sigmas()[0] - s).abs() < 1e-15);
        // T*X = (0, 4): target ubar*vbar = 1, sigma = 2*sqrt(2)
        let tx = ms.matrix().column(2);
        assert!((ms.targets()[2] - 1.0).abs() < 1e-15);
        assert!((tx[0] + 1.0 / (2.0 * s)).abs() < 1e-15);
        assert!((tx[1] - 3.0 / (2.0 * s)).abs() < 1e-15);
        assert_eq!(ms.pairs(), &[(1, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn constant_covariate_column_dropped() {
        let d = Dataset::new(
            1,
            1,
            DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]),
            DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 4.0, 5.0, 5.0, 5.0]),
            DVector::zeros(3),
        )
        .unwrap();
        let ms = build_moment_system(&d, &BasisSpec::new(CovariateBasis::Linear)).unwrap();
        // K1 = 2, K2 = 3: raw k = 4 is 1 * X_2 = 5, constant.
        assert!(ms.dropped_columns().contains(&0));
        assert!(ms.dropped_columns().contains(&4));
        assert!(!ms.kept_columns().contains(&4));
        assert_eq!(ms.k_effective() + ms.dropped_columns().len(), ms.k_raw());
    }

    #[test]
    fn non_finite_basis_is_reported() {
        let d = Dataset::new(
            1,
            1,
            DMatrix::from_column_slice(3, 1, &[0.0, f64::NAN, 3.0]),
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 4.0]),
            DVector::zeros(3),
        )
        .unwrap();
        let err = build_moment_system(&d, &BasisSpec::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteBasis { observation: 1, column: 1 }));
    }

    #[test]
    fn all_degenerate_is_empty_system() {
        let d = Dataset::new(
            1,
            1,
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::from_element(3, 1, 2.0),
            DVector::zeros(3),
        )
        .unwrap();
        assert!(matches!(
            build_moment_system(&d, &BasisSpec::default()),
            Err(Error::EmptySystem)
        ));
    }

    #[test]
    fn imbalance_length_checked() {
        let ms = MomentSystem::from_matrix(DMatrix::from_column_slice(2, 1, &[0.5, -0.5])).unwrap();
        assert!(ms.imbalance(&DVector::from_element(3, 1.0)).is_err());
    }
}
