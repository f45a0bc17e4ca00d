//! Runtime registries of weighting methods and effect estimators.
//!
//! Methods are looked up by name (`unweighted`, `eb`, `mdabw`, `webm`,
//! `oracle`; `linear`, `broadcasted`) and built from a serializable options
//! block, so a study or CLI run is fully described by plain data.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::{
    default_delta_grid, default_mdabw_deltas, effective_sample_size, solve_exact_entropy, solve_mdabw,
    solve_weights, tune_delta, BalanceConfig, BalanceResult, DeltaPathEntry,
};
use crate::basis::BasisSpec;
use crate::broadcast::{fit_broadcasted, BroadcastOptions, CpModel, SplineSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moments::{build_moment_system, MomentSystem};
use crate::parametric::{fit_linear_effect, LinearEffectModel};
use crate::screening::{select_subset, ScreeningResult, DEFAULT_BREAK_FACTOR};
use crate::simulation::{oracle_weights, ScenarioTruth};

/// How the WEBM threshold is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DeltaSelection {
    Fixed { delta: f64 },
    /// Tuning over `points` log-spaced values of the default grid.
    Grid { points: usize },
    Explicit { grid: Vec<f64> },
    /// The first value in order whose solve converges.
    FirstFeasible { grid: Vec<f64> },
}

impl Default for DeltaSelection {
    fn default() -> Self {
        DeltaSelection::Grid { points: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningOptions {
    /// Fixed threshold used at every step of the selection path.
    pub delta: f64,
    pub break_factor: f64,
}

impl Default for ScreeningOptions {
    fn default() -> Self {
        Self { delta: 1e-3, break_factor: DEFAULT_BREAK_FACTOR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodOptions {
    pub balance: BalanceConfig,
    pub delta: DeltaSelection,
    /// `delta_k = c / sqrt(n)` for the per-constraint method.
    pub mdabw_c: f64,
    pub screening: Option<ScreeningOptions>,
    /// Restrict to these covariate columns before anything else.
    pub covariate_subset: Option<Vec<usize>>,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self {
            balance: BalanceConfig::default(),
            delta: DeltaSelection::default(),
            mdabw_c: 1.0,
            screening: None,
            covariate_subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOutcome {
    pub method: String,
    pub weights: Vec<f64>,
    pub effective_sample_size: f64,
    pub delta: Option<f64>,
    pub weim: Option<f64>,
    pub converged: bool,
    pub balance: Option<BalanceResult>,
    pub tuning_path: Option<Vec<DeltaPathEntry>>,
    pub screening: Option<ScreeningResult>,
}

impl WeightOutcome {
    fn plain(method: &str, weights: DVector<f64>) -> Self {
        Self {
            method: method.to_string(),
            effective_sample_size: effective_sample_size(weights.as_slice()),
            weights: weights.iter().copied().collect(),
            delta: None,
            weim: None,
            converged: true,
            balance: None,
            tuning_path: None,
            screening: None,
        }
    }

    fn from_balance(method: &str, r: BalanceResult) -> Self {
        Self {
            method: method.to_string(),
            weights: r.weights.clone(),
            effective_sample_size: r.effective_sample_size,
            delta: Some(r.delta_used),
            weim: Some(r.weim),
            converged: r.converged,
            balance: Some(r),
            tuning_path: None,
            screening: None,
        }
    }

    pub fn weights_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }
}

pub struct WeightingContext<'a> {
    pub data: &'a Dataset,
    pub basis: &'a BasisSpec,
    /// Known data-generating process, needed only by `oracle`.
    pub truth: Option<&'a ScenarioTruth>,
}

pub trait WeightingMethod: Send + Sync {
    fn name(&self) -> &str;
    fn compute(&self, ctx: &WeightingContext) -> Result<WeightOutcome>;
}

struct Unweighted;

impl WeightingMethod for Unweighted {
    fn name(&self) -> &str {
        "unweighted"
    }

    fn compute(&self, ctx: &WeightingContext) -> Result<WeightOutcome> {
        Ok(WeightOutcome::plain(self.name(), DVector::from_element(ctx.data.n(), 1.0)))
    }
}

struct Oracle;

impl WeightingMethod for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn compute(&self, ctx: &WeightingContext) -> Result<WeightOutcome> {
        let truth = ctx
            .truth
            .ok_or_else(|| Error::UnsupportedDgp("oracle weights need the true data-generating process".into()))?;
        Ok(WeightOutcome::plain(self.name(), oracle_weights(ctx.data, truth)?))
    }
}

fn moment_system(ctx: &WeightingContext) -> Result<MomentSystem> {
    build_moment_system(ctx.data, ctx.basis)
}

struct ExactBalancing {
    cfg: BalanceConfig,
}

impl WeightingMethod for ExactBalancing {
    fn name(&self) -> &str {
        "eb"
    }

    fn compute(&self, ctx: &WeightingContext) -> Result<WeightOutcome> {
        let ms = moment_system(ctx)?;
        Ok(WeightOutcome::from_balance(self.name(), solve_exact_entropy(&ms, &self.cfg)?))
    }
}

struct Mdabw {
    cfg: BalanceConfig,
    c: f64,
}

impl WeightingMethod for Mdabw {
    fn name(&self) -> &str {
        "mdabw"
    }

    fn compute(&self, ctx: &WeightingContext) -> Result<WeightOutcome> {
        let ms = moment_system(ctx)?;
        let deltas = default_mdabw_deltas(&ms, self.c);
        Ok(WeightOutcome::from_balance(self.name(), solve_mdabw(&ms, &deltas, &self.cfg)?))
    }
}

struct Webm {
    cfg: BalanceConfig,
    delta: DeltaSelection,
    screening: Option<ScreeningOptions>,
}

impl Webm {
    fn solve(&self, ms: &MomentSystem) -> Result<WeightOutcome> {
        let tuned = |grid: Vec<f64>| -> Result<WeightOutcome> {
            let t = tune_delta(ms, &grid, &self.cfg)?;
            let mut out = WeightOutcome::from_balance("webm", t.result);
            out.delta = Some(t.delta_star);
            out.tuning_path = Some(t.path);
            Ok(out)
        };
        match &self.delta {
            DeltaSelection::Fixed { delta } => {
                let cfg = BalanceConfig { delta: *delta, ..self.cfg.clone() };
                Ok(WeightOutcome::from_balance("webm", solve_weights(ms, &cfg)?))
            }
            DeltaSelection::Grid { points } => tuned(default_delta_grid(ms, *points)),
            DeltaSelection::Explicit { grid } => tuned(grid.clone()),
            DeltaSelection::FirstFeasible { grid } => {
                let mut last = None;
                for delta in grid {
                    let cfg = BalanceConfig { delta: *delta, ..self.cfg.clone() };
                    match solve_weights(ms, &cfg) {
                        Ok(r) if r.converged => return Ok(WeightOutcome::from_balance("webm", r)),
                        Ok(r) => last = Some(format!("delta={delta:.3e}: gradient {:.3e}", r.gradient_norm)),
                        Err(e) => last = Some(format!("delta={delta:.3e}: {e}")),
                    }
                }
                Err(Error::TuningFailed(last.unwrap_or_else(|| "empty grid".into())))
            }
        }
    }
}

impl WeightingMethod for Webm {
    fn name(&self) -> &str {
        "webm"
    }

    fn compute(&self, ctx: &WeightingContext) -> Result<WeightOutcome> {
        let Some(s) = &self.screening else {
            return self.solve(&moment_system(ctx)?);
        };
        let cfg = BalanceConfig { delta: s.delta, ..self.cfg.clone() };
        let screening = select_subset(ctx.data, &cfg, s.break_factor)?;
        let reduced = ctx.data.select_covariates(&screening.selected_indices);
        let mut out = self.solve(&build_moment_system(&reduced, ctx.basis)?)?;
        out.screening = Some(screening);
        Ok(out)
    }
}

type MethodFactory = Box<dyn Fn(&MethodOptions) -> Box<dyn WeightingMethod> + Send + Sync>;

/// Weighting methods by name.
pub struct MethodRegistry {
    factories: BTreeMap<String, MethodFactory>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&MethodOptions) -> Box<dyn WeightingMethod> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, opts: &MethodOptions) -> Result<Box<dyn WeightingMethod>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Unknown { kind: "weighting method", name: name.to_string() })?;
        Ok(f(opts))
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("unweighted", |_| Box::new(Unweighted));
        r.register("oracle", |_| Box::new(Oracle));
        r.register("eb", |o| Box::new(ExactBalancing { cfg: o.balance.clone() }));
        r.register("mdabw", |o| Box::new(Mdabw { cfg: o.balance.clone(), c: o.mdabw_c }));
        r.register("webm", |o| {
            Box::new(Webm { cfg: o.balance.clone(), delta: o.delta.clone(), screening: o.screening.clone() })
        });
        r
    }
}

static METHODS: LazyLock<MethodRegistry> = LazyLock::new(MethodRegistry::default);

pub fn default_methods() -> &'static MethodRegistry {
    &METHODS
}

/// Everything needed to turn a dataset into weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePipelineConfig {
    pub basis: BasisSpec,
    pub method: String,
    #[serde(default)]
    pub options: MethodOptions,
}

impl BalancePipelineConfig {
    pub fn new(basis: BasisSpec, method: &str) -> Self {
        Self { basis, method: method.to_string(), options: MethodOptions::default() }
    }

    pub fn weights(&self, data: &Dataset, truth: Option<&ScenarioTruth>) -> Result<WeightOutcome> {
        self.weights_with(default_methods(), data, truth)
    }

    pub fn weights_with(
        &self,
        registry: &MethodRegistry,
        data: &Dataset,
        truth: Option<&ScenarioTruth>,
    ) -> Result<WeightOutcome> {
        let method = registry.build(&self.method, &self.options)?;
        let subset;
        let data = match &self.options.covariate_subset {
            Some(cols) => {
                if let Some(c) = cols.iter().find(|&&c| c >= data.l()) {
                    return Err(Error::Parameter(format!("covariate {c} out of range (L = {})", data.l())));
                }
                subset = data.select_covariates(cols);
                &subset
            }
            None => data,
        };
        method.compute(&WeightingContext { data, basis: &self.basis, truth })
    }

    /// Runs the pipeline once on `data` and returns a copy with every
    /// data-driven choice fixed: the screened covariate set, and for a tuned
    /// threshold the ladder of grid values from the chosen one upward.
    pub fn freeze(&self, data: &Dataset) -> Result<(Self, DVector<f64>)> {
        let out = self.weights(data, None)?;
        let mut frozen = self.clone();
        if let Some(s) = &out.screening {
            let base: Vec<usize> = match &self.options.covariate_subset {
                Some(cols) => s.selected_indices.iter().map(|&j| cols[j]).collect(),
                None => s.selected_indices.clone(),
            };
            frozen.options.covariate_subset = Some(base);
            frozen.options.screening = None;
        }
        if let (Some(path), Some(star)) = (&out.tuning_path, out.delta) {
            let mut grid: Vec<f64> = path.iter().map(|p| p.delta).filter(|d| *d >= star).collect();
            grid.sort_by(f64::total_cmp);
            frozen.options.delta = DeltaSelection::FirstFeasible { grid };
        }
        Ok((frozen, out.weights_vector()))
    }
}

/// A fitted dose-response model.
pub trait FittedEffect: Send + Sync {
    fn predict(&self, t: &DMatrix<f64>) -> Result<f64>;
    fn fitted_values(&self) -> &[f64];
    /// Estimated `B` for models that have one.
    fn coefficient_matrix(&self) -> Option<&DMatrix<f64>>;
    fn to_json(&self) -> Result<serde_json::Value>;
}

impl FittedEffect for LinearEffectModel {
    fn predict(&self, t: &DMatrix<f64>) -> Result<f64> {
        Ok(LinearEffectModel::predict(self, t))
    }

    fn fitted_values(&self) -> &[f64] {
        &self.fitted_values
    }

    fn coefficient_matrix(&self) -> Option<&DMatrix<f64>> {
        Some(&self.coefficient_matrix)
    }

    fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

impl FittedEffect for CpModel {
    fn predict(&self, t: &DMatrix<f64>) -> Result<f64> {
        CpModel::predict(self, t)
    }

    fn fitted_values(&self) -> &[f64] {
        &self.fitted_values
    }

    fn coefficient_matrix(&self) -> Option<&DMatrix<f64>> {
        None
    }

    fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

pub trait EffectEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn fit(&self, data: &Dataset, weights: &DVector<f64>) -> Result<Box<dyn FittedEffect>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub rank: usize,
    pub spline: SplineSpec,
    pub broadcast: BroadcastOptions,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { rank: 3, spline: SplineSpec::default(), broadcast: BroadcastOptions::default() }
    }
}

struct LinearEstimator;

impl EffectEstimator for LinearEstimator {
    fn name(&self) -> &str {
        "linear"
    }

    fn fit(&self, data: &Dataset, weights: &DVector<f64>) -> Result<Box<dyn FittedEffect>> {
        Ok(Box::new(fit_linear_effect(data, weights)?))
    }
}

struct BroadcastEstimator {
    opts: EstimatorOptions,
}

impl EffectEstimator for BroadcastEstimator {
    fn name(&self) -> &str {
        "broadcasted"
    }

    fn fit(&self, data: &Dataset, weights: &DVector<f64>) -> Result<Box<dyn FittedEffect>> {
        let o = &self.opts;
        Ok(Box::new(fit_broadcasted(data, weights, o.rank, &o.spline, &o.broadcast)?))
    }
}

type EstimatorFactory = Box<dyn Fn(&EstimatorOptions) -> Box<dyn EffectEstimator> + Send + Sync>;

/// Effect estimators by name.
pub struct EstimatorRegistry {
    factories: BTreeMap<String, EstimatorFactory>,
}

impl EstimatorRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&EstimatorOptions) -> Box<dyn EffectEstimator> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, opts: &EstimatorOptions) -> Result<Box<dyn EffectEstimator>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Unknown { kind: "estimator", name: name.to_string() })?;
        Ok(f(opts))
    }
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("linear", |_| Box::new(LinearEstimator));
        r.register("broadcasted", |o| Box::new(BroadcastEstimator { opts: o.clone() }));
        r
    }
}

static ESTIMATORS: LazyLock<EstimatorRegistry> = LazyLock::new(EstimatorRegistry::default);

pub fn default_estimators() -> &'static EstimatorRegistry {
    &ESTIMATORS
}
