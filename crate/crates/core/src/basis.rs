//! Sieve basis functions for the treatment and the covariates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentBasis {
    /// `(1, vec(T))`, so `K1 = pq + 1`.
    #[default]
    InterceptPlusVec,
}

/// A monomial `prod_j X_j^e_j`; an empty factor list is the constant 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomColumn {
    pub factors: Vec<(usize, u32)>,
}

impl CustomColumn {
    pub fn constant() -> Self {
        Self { factors: Vec::new() }
    }

    fn eval(&self, row: &[f64]) -> f64 {
        self.factors.iter().map(|&(j, e)| row[j].powi(e as i32)).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "columns")]
pub enum CovariateBasis {
    /// `(1, X)`
    #[default]
    Linear,
    /// `(1, X, X*X)` with the Hadamard square.
    LinearPlusSquares,
    /// `(1, X, X_j X_k for j < k)`
    LinearPlusInteractions,
    Custom(Vec<CustomColumn>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(default)]
    pub treatment_basis: TreatmentBasis,
    #[serde(default)]
    pub covariate_basis: CovariateBasis,
}

impl BasisSpec {
    pub fn new(covariate_basis: CovariateBasis) -> Self {
        Self { treatment_basis: TreatmentBasis::InterceptPlusVec, covariate_basis }
    }

    pub fn k1(&self, p: usize, q: usize) -> usize {
        match self.treatment_basis {
            TreatmentBasis::InterceptPlusVec => p * q + 1,
        }
    }

    pub fn k2(&self, l: usize) -> usize {
        match &self.covariate_basis {
            CovariateBasis::Linear => l + 1,
            CovariateBasis::LinearPlusSquares => 2 * l + 1,
            CovariateBasis::LinearPlusInteractions => 1 + l + l * (l - 1) / 2,
            CovariateBasis::Custom(cols) => cols.len(),
        }
    }

    /// `n x K1` matrix of `u_{K1}(T_i)`.
    pub fn treatment_values(&self, data: &Dataset) -> DMatrix<f64> {
        let n = data.n();
        let pq = data.p() * data.q();
        match self.treatment_basis {
            TreatmentBasis::InterceptPlusVec => DMatrix::from_fn(n, pq + 1, |i, c| {
                if c == 0 {
                    1.0
                } else {
                    data.treatments()[(i, c - 1)]
                }
            }),
        }
    }

    /// `n x K2` matrix of `v_{K2}(X_i)`.
    pub fn covariate_values(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let x = data.covariates();
        let (n, l) = x.shape();
        let out = match &self.covariate_basis {
            CovariateBasis::Linear => {
                DMatrix::from_fn(n, l + 1, |i, c| if c == 0 { 1.0 } else { x[(i, c - 1)] })
            }
            CovariateBasis::LinearPlusSquares => DMatrix::from_fn(n, 2 * l + 1, |i, c| match c {
                0 => 1.0,
                c if c <= l => x[(i, c - 1)],
                c => x[(i, c - 1 - l)].powi(2),
            }),
            CovariateBasis::LinearPlusInteractions => {
                let pairs: Vec<(usize, usize)> =
                    (0..l).flat_map(|j| (j + 1..l).map(move |k| (j, k))).collect();
                DMatrix::from_fn(n, 1 + l + pairs.len(), |i, c| match c {
                    0 => 1.0,
                    c if c <= l => x[(i, c - 1)],
                    c => {
                        let (j, k) = pairs[c - 1 - l];
                        x[(i, j)] * x[(i, k)]
                    }
                })
            }
            CovariateBasis::Custom(cols) => {
                if cols.is_empty() {
                    return Err(Error::Parameter("custom covariate basis has no columns".into()));
                }
                for col in cols {
                    if let Some(&(j, _)) = col.factors.iter().find(|&&(j, _)| j >= l) {
                        return Err(Error::Parameter(format!(
                            "custom basis references covariate {j}, but L = {l}"
                        )));
                    }
                }
                let mut m = DMatrix::zeros(n, cols.len());
                let mut row = vec![0.0; l];
                for i in 0..n {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = x[(i, j)];
                    }
                    for (c, col) in cols.iter().enumerate() {
                        m[(i, c)] = col.eval(&row);
                    }
                }
                m
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn data() -> Dataset {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        Dataset::new(1, 2, DMatrix::zeros(2, 2), x, DVector::zeros(2)).unwrap()
    }

    #[test]
    fn dimensions() {
        let spec = BasisSpec::new(CovariateBasis::LinearPlusSquares);
        assert_eq!(spec.k1(3, 2), 7);
        assert_eq!(spec.k2(5), 11);
        assert_eq!(BasisSpec::new(CovariateBasis::LinearPlusInteractions).k2(5), 16);
    }

    #[test]
    fn interaction_columns() {
        let v = BasisSpec::new(CovariateBasis::LinearPlusInteractions)
            .covariate_values(&data())
            .unwrap();
        assert_eq!(v.ncols(), 7);
        assert_eq!(v.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 2.0, 3.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn custom_columns_match_builtin() {
        let custom = CovariateBasis::Custom(vec![
            CustomColumn::constant(),
            CustomColumn { factors: vec![(0, 1)] },
            CustomColumn { factors: vec![(1, 1)] },
            CustomColumn { factors: vec![(2, 1)] },
            CustomColumn { factors: vec![(0, 2)] },
            CustomColumn { factors: vec![(1, 2)] },
            CustomColumn { factors: vec![(2, 2)] },
        ]);
        let a = BasisSpec::new(custom).covariate_values(&data()).unwrap();
        let b = BasisSpec::new(CovariateBasis::LinearPlusSquares).covariate_values(&data()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn custom_out_of_range() {
        let custom = CovariateBasis::Custom(vec![CustomColumn { factors: vec![(9, 1)] }]);
        assert!(BasisSpec::new(custom).covariate_values(&data()).is_err());
    }
}
