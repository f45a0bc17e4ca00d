use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use webal::balance::DualSolver;
use webal::basis::{BasisSpec, CovariateBasis};
use webal::broadcast::{ResponseMode, SplineSpec};
use webal::pipeline::{BalancePipelineConfig, DeltaSelection, EstimatorOptions, MethodOptions, ScreeningOptions};

use crate::args::{BalanceArgs, BasisArg, DataArgs, FitArgs, ResponseArg, SolverArg};
use crate::error::CliError;
use crate::io::read_sidecar;

pub const DEFAULT_OUTPUT_DIR: &str = "webal-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: Option<PathBuf>,
    pub p: Option<usize>,
    pub q: Option<usize>,
    pub basis: BasisSpec,
    pub method: String,
    pub method_options: MethodOptions,
    pub estimator: String,
    pub estimator_options: EstimatorOptions,
    pub bootstrap: Option<usize>,
    pub level: f64,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: None,
            p: None,
            q: None,
            basis: BasisSpec::default(),
            method: "webm".into(),
            method_options: MethodOptions::default(),
            estimator: "linear".into(),
            estimator_options: EstimatorOptions::default(),
            bootstrap: None,
            level: 0.95,
            output_dir: None,
            seed: 0,
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

impl PipelineConfig {
    pub fn resolve(data: &DataArgs, balance: &BalanceArgs, fit: Option<&FitArgs>) -> Result<Self, CliError> {
        let mut c: PipelineConfig = match &data.config {
            Some(path) => read_json(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &data.data {
            c.data = Some(d.clone());
        }
        c.p = data.p.or(c.p);
        c.q = data.q.or(c.q);
        if let Some(dir) = &data.out_dir {
            c.output_dir = Some(dir.clone());
        }
        c.seed = data.seed.unwrap_or(c.seed);
        c.apply_balance(balance)?;
        if let Some(f) = fit {
            c.apply_fit(f)?;
        }
        Ok(c)
    }

    fn apply_balance(&mut self, a: &BalanceArgs) -> Result<(), CliError> {
        if let Some(b) = a.basis {
            self.basis.covariate_basis = match b {
                BasisArg::Linear => CovariateBasis::Linear,
                BasisArg::Squares => CovariateBasis::LinearPlusSquares,
                BasisArg::Interactions => CovariateBasis::LinearPlusInteractions,
            };
        }
        if let Some(m) = &a.method {
            self.method = m.clone();
        }
        let o = &mut self.method_options;
        if let Some(delta) = a.delta {
            o.delta = DeltaSelection::Fixed { delta };
        }
        if let Some(grid) = &a.delta_grid {
            o.delta = DeltaSelection::Explicit { grid: grid.clone() };
        }
        if let Some(points) = a.grid_points {
            o.delta = DeltaSelection::Grid { points };
        }
        if let Some(c) = a.mdabw_c {
            o.mdabw_c = c;
        }
        if a.screen || a.break_factor.is_some() || a.screen_delta.is_some() {
            let mut s = o.screening.clone().unwrap_or_default();
            if let Some(bf) = a.break_factor {
                s.break_factor = bf;
            }
            if let Some(d) = a.screen_delta {
                s.delta = d;
            }
            o.screening = Some(s);
        }
        if let Some(cols) = &a.covariates {
            if cols.contains(&0) {
                return Err(CliError::Input("--covariates are 1-based".into()));
            }
            o.covariate_subset = Some(cols.iter().map(|c| c - 1).collect());
        }
        if let Some(it) = a.max_iter {
            o.balance.max_iterations = it;
        }
        if let Some(tol) = a.tol {
            o.balance.gradient_tolerance = tol;
        }
        if let Some(s) = a.solver {
            o.balance.solver = match s {
                SolverArg::Newton => DualSolver::Newton,
                SolverArg::Bfgs => DualSolver::Bfgs,
            };
        }
        Ok(())
    }

    fn apply_fit(&mut self, a: &FitArgs) -> Result<(), CliError> {
        if let Some(e) = &a.estimator {
            self.estimator = e.clone();
        }
        let o = &mut self.estimator_options;
        if let Some(r) = a.rank {
            o.rank = r;
        }
        if a.spline_order.is_some() || a.spline_dim.is_some() {
            let order = a.spline_order.unwrap_or(o.spline.order);
            let dim = a.spline_dim.unwrap_or(o.spline.dimension());
            o.spline = SplineSpec::equally_spaced(order, dim)?;
        }
        if let Some(r) = a.restarts {
            o.broadcast.restarts = r;
        }
        if let Some(r) = a.response {
            o.broadcast.response = match r {
                ResponseArg::Transformed => ResponseMode::Transformed,
                ResponseArg::WeightedResidual => ResponseMode::WeightedResidual,
            };
        }
        if let Some(b) = a.bootstrap {
            self.bootstrap = Some(b);
        }
        if let Some(l) = a.level {
            self.level = l;
        }
        Ok(())
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        let path = self.data.as_deref().ok_or_else(|| CliError::Input("no input data: pass --data <csv>".into()))?;
        if !path.is_file() {
            return Err(CliError::Input(format!("{}: no such file", path.display())));
        }
        Ok(path)
    }

    /// Treatment dims from flags or config, else from the data sidecar.
    pub fn dims(&self) -> Result<(usize, usize), CliError> {
        if let (Some(p), Some(q)) = (self.p, self.q) {
            return Ok((p, q));
        }
        match read_sidecar(self.data_path()?)? {
            Some(s) => Ok((self.p.unwrap_or(s.p), self.q.unwrap_or(s.q))),
            None => Err(CliError::Input(
                "treatment dims unknown: pass --p and --q or provide a <data>.json sidecar".into(),
            )),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn pipeline(&self) -> BalancePipelineConfig {
        BalancePipelineConfig { basis: self.basis.clone(), method: self.method.clone(), options: self.method_options.clone() }
    }

    pub fn screening_options(&self) -> ScreeningOptions {
        self.method_options.screening.clone().unwrap_or_default()
    }
}
