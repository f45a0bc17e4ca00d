//! Observational datasets with a matrix-valued treatment.
//!
//! Treatments are stored flattened: row `i` of [`Dataset::treatments`] is
//! `vec(T_i)`, the column-major vectorization of the `p x q` treatment, so
//! entry `(r, c)` of `T_i` lives in column `c * p + r`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    p: usize,
    q: usize,
    treatments: DMatrix<f64>,
    covariates: DMatrix<f64>,
    outcomes: DVector<f64>,
}

impl Dataset {
    /// Checks shapes only. Non-finite entries are allowed here so that
    /// [`validate_dataset`] can report them; downstream builders reject them.
    pub fn new(
        p: usize,
        q: usize,
        treatments: DMatrix<f64>,
        covariates: DMatrix<f64>,
        outcomes: DVector<f64>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n < 2 {
            return Err(Error::Input(format!("need at least 2 observations, got {n}")));
        }
        if p == 0 || q == 0 {
            return Err(Error::Input(format!("treatment dims must be positive, got {p}x{q}")));
        }
        if covariates.ncols() == 0 {
            return Err(Error::Input("need at least one covariate".into()));
        }
        if treatments.ncols() != p * q {
            return Err(Error::Input(format!(
                "treatment matrix has {} columns, expected p*q = {}",
                treatments.ncols(),
                p * q
            )));
        }
        if treatments.nrows() != n || covariates.nrows() != n {
            return Err(Error::Input(format!(
                "row counts disagree: outcomes {n}, treatments {}, covariates {}",
                treatments.nrows(),
                covariates.nrows()
            )));
        }
        Ok(Self { p, q, treatments, covariates, outcomes })
    }

    /// Builds a dataset from per-observation `p x q` treatment matrices.
    pub fn from_matrices(
        treatments: &[DMatrix<f64>],
        covariates: DMatrix<f64>,
        outcomes: DVector<f64>,
    ) -> Result<Self> {
        let first = treatments
            .first()
            .ok_or_else(|| Error::Input("no treatments supplied".into()))?;
        let (p, q) = first.shape();
        let mut flat = DMatrix::zeros(treatments.len(), p * q);
        for (i, t) in treatments.iter().enumerate() {
            if t.shape() != (p, q) {
                return Err(Error::Input(format!(
                    "treatment {i} has shape {:?}, expected {:?}",
                    t.shape(),
                    (p, q)
                )));
            }
            for (k, v) in t.iter().enumerate() {
                flat[(i, k)] = *v;
            }
        }
        Self::new(p, q, flat, covariates, outcomes)
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of covariates `L`.
    pub fn l(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn treatments(&self) -> &DMatrix<f64> {
        &self.treatments
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn outcomes(&self) -> &DVector<f64> {
        &self.outcomes
    }

    /// The `i`-th treatment as a `p x q` matrix.
    pub fn treatment(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_iterator(self.p, self.q, self.treatments.row(i).iter().copied())
    }

    /// Rows `idx` in order, with repetition allowed (bootstrap resampling).
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            p: self.p,
            q: self.q,
            treatments: self.treatments.select_rows(idx),
            covariates: self.covariates.select_rows(idx),
            outcomes: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.outcomes[i])),
        }
    }

    /// Keeps only the covariate columns in `cols`, in the given order.
    pub fn select_covariates(&self, cols: &[usize]) -> Dataset {
        Dataset {
            p: self.p,
            q: self.q,
            treatments: self.treatments.clone(),
            covariates: self.covariates.select_columns(cols),
            outcomes: self.outcomes.clone(),
        }
    }

    pub fn with_outcomes(&self, outcomes: DVector<f64>) -> Result<Dataset> {
        Dataset::new(self.p, self.q, self.treatments.clone(), self.covariates.clone(), outcomes)
    }

    pub fn is_finite(&self) -> bool {
        self.treatments.iter().all(|v| v.is_finite())
            && self.covariates.iter().all(|v| v.is_finite())
            && self.outcomes.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    NonFiniteOutcome { row: usize },
    NonFiniteTreatment { row: usize, column: usize },
    NonFiniteCovariate { row: usize, column: usize },
    /// Constant column; its moment products cannot be variance-scaled.
    ConstantCovariate { column: usize },
    ConstantTreatmentEntry { column: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub finite_count: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub l: usize,
    pub issues: Vec<Issue>,
    pub outcome_summary: OutcomeSummary,
}

impl DiagnosticsReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

fn column_is_constant(m: &DMatrix<f64>, c: usize) -> bool {
    let col = m.column(c);
    let first = col[0];
    col.iter().all(|v| *v == first)
}

/// Reports shape, finiteness and degeneracy problems without failing.
pub fn validate_dataset(data: &Dataset) -> DiagnosticsReport {
    let mut issues = Vec::new();
    for (row, y) in data.outcomes.iter().enumerate() {
        if !y.is_finite() {
            issues.push(Issue::NonFiniteOutcome { row });
        }
    }
    for row in 0..data.n() {
        for column in 0..data.treatments.ncols() {
            if !data.treatments[(row, column)].is_finite() {
                issues.push(Issue::NonFiniteTreatment { row, column });
            }
        }
        for column in 0..data.l() {
            if !data.covariates[(row, column)].is_finite() {
                issues.push(Issue::NonFiniteCovariate { row, column });
            }
        }
    }
    for column in 0..data.treatments.ncols() {
        if column_is_constant(&data.treatments, column) {
            issues.push(Issue::ConstantTreatmentEntry { column });
        }
    }
    for column in 0..data.l() {
        if column_is_constant(&data.covariates, column) {
            issues.push(Issue::ConstantCovariate { column });
        }
    }

    let finite: Vec<f64> = data.outcomes.iter().copied().filter(|v| v.is_finite()).collect();
    let k = finite.len();
    let mean = if k > 0 { finite.iter().sum::<f64>() / k as f64 } else { f64::NAN };
    let sd = if k > 1 {
        (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    let outcome_summary = OutcomeSummary {
        finite_count: k,
        mean,
        sd,
        min: finite.iter().copied().fold(f64::INFINITY, f64::min),
        max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };

    DiagnosticsReport {
        n: data.n(),
        p: data.p,
        q: data.q,
        l: data.l(),
        issues,
        outcome_summary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let t = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 0.5, 1.0, -1.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 0.0, 5.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        Dataset::new(2, 1, t, x, y).unwrap()
    }

    #[test]
    fn rejects_mismatched_rows() {
        let err = Dataset::new(
            1,
            1,
            DMatrix::zeros(3, 1),
            DMatrix::zeros(2, 1),
            DVector::zeros(3),
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn rejects_single_observation() {
        let err = Dataset::new(1, 1, DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DVector::zeros(1));
        assert!(err.is_err());
    }

    #[test]
    fn treatment_is_column_major() {
        let t = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = Dataset::from_matrices(
            &[t.clone(), t.clone() * 2.0],
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(d.treatment(0), t);
        // vec(T) column-major: (1, 4, 2, 5, 3, 6)
        assert_eq!(d.treatments()[(0, 1)], 4.0);
        assert_eq!(d.treatments()[(1, 2)], 4.0);
    }

    #[test]
    fn flags_nan_outcome_row() {
        let d = tiny();
        let mut y = d.outcomes().clone();
        y[1] = f64::NAN;
        let d = d.with_outcomes(y).unwrap();
        let report = validate_dataset(&d);
        assert!(report.issues.contains(&Issue::NonFiniteOutcome { row: 1 }));
        assert_eq!(report.outcome_summary.finite_count, 2);
    }

    #[test]
    fn flags_constant_covariate() {
        let report = validate_dataset(&tiny());
        assert_eq!(report.issues, vec![Issue::ConstantCovariate { column: 1 }]);
    }

    #[test]
    fn clean_dataset_has_no_issues() {
        let d = tiny().select_covariates(&[0]);
        let report = validate_dataset(&d);
        assert!(report.is_clean(), "{:?}", report.issues);
        assert_eq!((report.n, report.p, report.q, report.l), (3, 2, 1, 1));
    }
}
