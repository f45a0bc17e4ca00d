//! Replicated Monte Carlo studies over scenarios, sample sizes and
//! weighting methods.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{generate_scenario, ScenarioTruth};
use crate::basis::BasisSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{
    default_estimators, default_methods, BalancePipelineConfig, EstimatorOptions, MethodOptions, ScreeningOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub scenarios: Vec<u8>,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub methods: Vec<String>,
    pub estimator: String,
    pub master_seed: u64,
    pub method_options: MethodOptions,
    pub estimator_options: EstimatorOptions,
    /// Screening applied to `webm` on scenarios whose covariate dimension
    /// exceeds five.
    pub high_dimensional_screening: Option<ScreeningOptions>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![1],
            sample_sizes: vec![500],
            replicates: 100,
            methods: vec!["unweighted".into(), "eb".into(), "mdabw".into(), "webm".into()],
            estimator: "linear".into(),
            master_seed: 2024,
            method_options: MethodOptions::default(),
            estimator_options: EstimatorOptions::default(),
            high_dimensional_screening: Some(ScreeningOptions::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Element-wise RMSE of the estimated `B`.
    CoefficientRmse,
    /// RMSE of fitted values against the true dose-response at the
    /// training treatments.
    FittedRmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub scenario: u8,
    pub n: usize,
    pub method: String,
    pub estimator: String,
    pub metric: Metric,
    /// One entry per replicate; `None` where the replicate failed.
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub failures: Vec<ReplicateFailure>,
    /// Replicates whose weights came from a solve that did not converge.
    pub nonconverged: usize,
    /// For fitted-value metrics: the same RMSE against observed outcomes.
    pub mean_vs_observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub cells: Vec<StudyCell>,
}

impl StudyReport {
    pub fn cell(&self, scenario: u8, n: usize, method: &str) -> Option<&StudyCell> {
        self.cells.iter().find(|c| c.scenario == scenario && c.n == n && c.method == method)
    }

    /// Plain-text table: one row per (scenario, n), one column per method,
    /// entries `mean (sd)`.
    pub fn render_table(&self) -> String {
        let methods = &self.config.methods;
        let mut out = String::new();
        let _ = write!(out, "{:<9}{:>7}", "scenario", "n");
        for m in methods {
            let _ = write!(out, "  {:>18}", m);
        }
        out.push('\n');
        for &s in &self.config.scenarios {
            for &n in &self.config.sample_sizes {
                let _ = write!(out, "{:<9}{:>7}", s, n);
                for m in methods {
                    let text = match self.cell(s, n, m) {
                        Some(StudyCell { mean: Some(mu), sd, failures, .. }) => {
                            let mut t = format!("{mu:.4} ({:.4})", sd.unwrap_or(f64::NAN));
                            if !failures.is_empty() {
                                t.push_str(&format!("*{}", failures.len()));
                            }
                            t
                        }
                        _ => "-".into(),
                    };
                    let _ = write!(out, "  {:>18}", text);
                }
                out.push('\n');
            }
        }
        if self.cells.iter().any(|c| !c.failures.is_empty()) {
            out.push_str("*k: k replicates failed and are excluded from that cell\n");
        }
        out
    }
}

/// Seed of the dataset for one replicate: stream `scenario * 2^40 + n * 2^20
/// + replicate` of the master ChaCha generator.
pub fn replicate_seed(master: u64, scenario: u8, n: usize, replicate: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((scenario as u64) << 40) ^ ((n as u64) << 20) ^ replicate as u64);
    rng.next_u64()
}

fn metric_for(truth: &ScenarioTruth, estimator: &str) -> Metric {
    if truth.is_linear() && estimator == "linear" {
        Metric::CoefficientRmse
    } else {
        Metric::FittedRmse
    }
}

fn pipeline_for(cfg: &StudyConfig, truth: &ScenarioTruth, method: &str) -> BalancePipelineConfig {
    let mut p = BalancePipelineConfig::new(BasisSpec::new(truth.covariate_basis()), method);
    p.options = cfg.method_options.clone();
    if method == "webm" && truth.covariate_dim > 5 {
        p.options.screening = cfg.high_dimensional_screening.clone();
    }
    p
}

struct Evaluation {
    value: f64,
    vs_observed: f64,
    converged: bool,
}

fn evaluate(
    cfg: &StudyConfig,
    data: &Dataset,
    truth: &ScenarioTruth,
    method: &str,
    metric: Metric,
) -> Result<Evaluation> {
    let weights = pipeline_for(cfg, truth, method).weights(data, Some(truth))?;
    let estimator = default_estimators().build(&cfg.estimator, &cfg.estimator_options)?;
    let fit = estimator.fit(data, &weights.weights_vector())?;
    let fitted = DVector::from_column_slice(fit.fitted_values());
    let vs_observed = ((&fitted - data.outcomes()).norm_squared() / data.n() as f64).sqrt();
    let value = match metric {
        Metric::CoefficientRmse => {
            let b = fit
                .coefficient_matrix()
                .ok_or_else(|| Error::Parameter(format!("estimator {} has no coefficient matrix", cfg.estimator)))?;
            ((b - &truth.true_b).norm_squared() / b.len() as f64).sqrt()
        }
        Metric::FittedRmse => {
            let truth_at = DVector::from_fn(data.n(), |i, _| truth.dose_response(&data.treatment(i)));
            ((&fitted - truth_at).norm_squared() / data.n() as f64).sqrt()
        }
    };
    Ok(Evaluation { value, vs_observed, converged: weights.converged })
}

fn validate(cfg: &StudyConfig) -> Result<()> {
    if cfg.replicates == 0 || cfg.scenarios.is_empty() || cfg.sample_sizes.is_empty() || cfg.methods.is_empty() {
        return Err(Error::Parameter("study needs scenarios, sample sizes, methods and >= 1 replicate".into()));
    }
    for m in &cfg.methods {
        default_methods().build(m, &cfg.method_options)?;
    }
    default_estimators().build(&cfg.estimator, &cfg.estimator_options)?;
    for &s in &cfg.scenarios {
        ScenarioTruth::new(s)?;
    }
    if let Some(&n) = cfg.sample_sizes.iter().find(|&&n| n < 10) {
        return Err(Error::Parameter(format!("sample size {n} is below 10")));
    }
    Ok(())
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let sd = if values.len() > 1 {
        Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt())
    } else {
        None
    };
    (Some(mean), sd)
}

/// Runs every (scenario, n, method) cell. Replicate `r` of a given
/// (scenario, n) uses the same dataset for every method.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    validate(cfg)?;
    let mut cells = Vec::new();
    for &scenario in &cfg.scenarios {
        for &n in &cfg.sample_sizes {
            let truth = ScenarioTruth::new(scenario)?;
            let metric = metric_for(&truth, &cfg.estimator);
            // rows: replicates; columns: methods
            let grid: Vec<Vec<std::result::Result<Evaluation, String>>> = (0..cfg.replicates)
                .into_par_iter()
                .map(|r| {
                    let seed = replicate_seed(cfg.master_seed, scenario, n, r);
                    match generate_scenario(scenario, n, seed) {
                        Ok((data, truth)) => cfg
                            .methods
                            .iter()
                            .map(|m| evaluate(cfg, &data, &truth, m, metric).map_err(|e| e.to_string()))
                            .collect(),
                        Err(e) => cfg.methods.iter().map(|_| Err(e.to_string())).collect(),
                    }
                })
                .collect();
            for (j, method) in cfg.methods.iter().enumerate() {
                let mut values = Vec::with_capacity(cfg.replicates);
                let mut observed = Vec::new();
                let mut failures = Vec::new();
                let mut nonconverged = 0;
                for (r, row) in grid.iter().enumerate() {
                    match &row[j] {
                        Ok(ev) => {
                            values.push(Some(ev.value));
                            observed.push(ev.vs_observed);
                            nonconverged += (!ev.converged) as usize;
                        }
                        Err(e) => {
                            values.push(None);
                            failures.push(ReplicateFailure { replicate: r, error: e.clone() });
                        }
                    }
                }
                let ok: Vec<f64> = values.iter().flatten().copied().collect();
                let (mean, sd) = mean_sd(&ok);
                cells.push(StudyCell {
                    scenario,
                    n,
                    method: method.clone(),
                    estimator: cfg.estimator.clone(),
                    metric,
                    values,
                    mean,
                    sd,
                    failures,
                    nonconverged,
                    mean_vs_observed: match metric {
                        Metric::FittedRmse => mean_sd(&observed).0,
                        Metric::CoefficientRmse => None,
                    },
                });
            }
        }
    }
    Ok(StudyReport { config: cfg.clone(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bookkeeping_and_determinism() {
        let cfg = StudyConfig {
            scenarios: vec![1, 2],
            sample_sizes: vec![60, 80],
            replicates: 5,
            methods: vec!["unweighted".into(), "oracle".into(), "mdabw".into()],
            ..Default::default()
        };
        let a = run_study(&cfg).unwrap();
        assert_eq!(a.cells.len(), 12);
        assert!(a.cells.iter().all(|c| c.values.len() == 5));
        let b = run_study(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.render_table().lines().count() >= 5);
    }

    #[test]
    fn rejects_unknown_method() {
        let cfg = StudyConfig { methods: vec!["ipw".into()], replicates: 1, ..Default::default() };
        assert!(matches!(run_study(&cfg), Err(Error::Unknown { .. })));
    }

    #[test]
    fn seeds_differ_by_replicate() {
        assert_ne!(replicate_seed(1, 1, 500, 0), replicate_seed(1, 1, 500, 1));
        assert_eq!(replicate_seed(1, 1, 500, 3), replicate_seed(1, 1, 500, 3));
    }
}
