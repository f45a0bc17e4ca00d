use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};
use webal::balance::{default_delta_grid, tune_delta};
use webal::basis::{BasisSpec, CovariateBasis};
use webal::data::Dataset;
use webal::moments::{build_moment_system, MomentSystem};
use webal::parametric::{bootstrap_ci, coefficient_names, fit_linear_effect, sandwich_variance};
use webal::pipeline::{default_estimators, DeltaSelection, WeightOutcome};
use webal::screening::select_subset;
use webal::simulation::{generate_scenario, replicate_seed, run_study, StudyConfig, StudyReport};

use crate::args::{BalanceArgs, DataArgs, FitArgs, SimulateArgs};
use crate::config::{read_json, PipelineConfig, DEFAULT_OUTPUT_DIR};
use crate::error::CliError;
use crate::io::{fmt_f64, read_dataset, write_dataset};
use crate::manifest::Manifest;

/// Files written by one command, collected for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
        self.text(name, &(body + "\n"))
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut body = header.join(",");
        body.push('\n');
        for r in rows {
            body.push_str(&r.join(","));
            body.push('\n');
        }
        self.text(name, &body)
    }

    fn finish(self, mut manifest: Manifest) -> Result<(), CliError> {
        manifest.outputs = self.files;
        manifest.write(&self.dir)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn load(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<Dataset, CliError> {
    let path = cfg.data_path()?;
    let (p, q) = cfg.dims()?;
    manifest.add_input(path)?;
    read_dataset(path, p, q)
}

fn start(command: &str, cfg: &PipelineConfig) -> Result<(Manifest, Outputs), CliError> {
    let value = serde_json::to_value(cfg).map_err(|e| CliError::Input(e.to_string()))?;
    Ok((Manifest::new(command, cfg.seed, value), Outputs::new(cfg.output_dir())?))
}

fn treatment_term(l1: usize, p: usize) -> String {
    if l1 == 0 {
        "1".into()
    } else {
        let c = l1 - 1;
        format!("t_{}_{}", c % p + 1, c / p + 1)
    }
}

/// Name of covariate basis column `l2`; `cols` maps local covariate indices
/// to 0-based columns of the input file.
fn covariate_term(basis: &CovariateBasis, l2: usize, cols: &[usize]) -> String {
    let x = |j: usize| format!("x_{}", cols[j] + 1);
    let l = cols.len();
    match basis {
        _ if l2 == 0 && !matches!(basis, CovariateBasis::Custom(_)) => "1".into(),
        CovariateBasis::Linear => x(l2 - 1),
        CovariateBasis::LinearPlusSquares if l2 <= l => x(l2 - 1),
        CovariateBasis::LinearPlusSquares => format!("{}^2", x(l2 - 1 - l)),
        CovariateBasis::LinearPlusInteractions if l2 <= l => x(l2 - 1),
        CovariateBasis::LinearPlusInteractions => {
            let (j, k) = (0..l).flat_map(|j| (j + 1..l).map(move |k| (j, k))).nth(l2 - 1 - l).expect("basis index");
            format!("{}*{}", x(j), x(k))
        }
        CovariateBasis::Custom(c) => {
            let f = &c[l2].factors;
            if f.is_empty() {
                "1".into()
            } else {
                f.iter().map(|&(j, e)| if e == 1 { x(j) } else { format!("{}^{e}", x(j)) }).collect::<Vec<_>>().join("*")
            }
        }
    }
}

/// Input-file columns the weights were computed from.
fn balanced_columns(cfg: &PipelineConfig, l: usize, out: &WeightOutcome) -> Vec<usize> {
    let base: Vec<usize> = cfg.method_options.covariate_subset.clone().unwrap_or_else(|| (0..l).collect());
    match &out.screening {
        Some(s) => s.selected_indices.iter().map(|&j| base[j]).collect(),
        None => base,
    }
}

fn imbalance_rows(ms: &MomentSystem, basis: &BasisSpec, p: usize, cols: &[usize], w: &WeightOutcome) -> Result<Vec<Vec<String>>, CliError> {
    let ones = nalgebra::DVector::from_element(ms.n(), 1.0);
    let before = ms.imbalance(&ones)?;
    let after = ms.imbalance(&w.weights_vector())?;
    Ok(ms
        .pairs()
        .iter()
        .enumerate()
        .map(|(k, &(l1, l2))| {
            vec![
                treatment_term(l1, p),
                covariate_term(&basis.covariate_basis, l2, cols),
                fmt_f64(ms.targets()[k]),
                fmt_f64(ms.sigmas()[k]),
                fmt_f64(before[k]),
                fmt_f64(after[k]),
            ]
        })
        .collect())
}

pub fn weights(data: &DataArgs, balance: &BalanceArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::resolve(data, balance, None)?;
    let (mut manifest, mut out) = start("weights", &cfg)?;
    let ds = load(&cfg, &mut manifest)?;
    let w = cfg.pipeline().weights(&ds, None)?;
    let cols = balanced_columns(&cfg, ds.l(), &w);
    let ms = build_moment_system(&ds.select_covariates(&cols), &cfg.basis)?;
    out.json("weights.json", &w)?;
    let rows: Vec<Vec<String>> = w.weights.iter().enumerate().map(|(i, v)| vec![(i + 1).to_string(), fmt_f64(*v)]).collect();
    out.csv("weights.csv", &["row", "weight"], &rows)?;
    let rows = imbalance_rows(&ms, &cfg.basis, ds.p(), &cols, &w)?;
    out.csv(
        "imbalance.csv",
        &["treatment_term", "covariate_term", "target", "sd", "scaled_unweighted", "scaled_weighted"],
        &rows,
    )?;
    println!(
        "{}: n = {}, ESS = {:.1}, WEIM = {}, delta = {}, converged = {}",
        w.method,
        ds.n(),
        w.effective_sample_size,
        w.weim.map_or("-".into(), |v| format!("{v:.6e}")),
        w.delta.map_or("-".into(), |v| format!("{v:.6e}")),
        w.converged
    );
    out.finish(manifest)
}

pub fn tune(data: &DataArgs, balance: &BalanceArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::resolve(data, balance, None)?;
    let (mut manifest, mut out) = start("tune", &cfg)?;
    let ds = load(&cfg, &mut manifest)?;
    let ds = match &cfg.method_options.covariate_subset {
        Some(c) => {
            if let Some(bad) = c.iter().find(|&&j| j >= ds.l()) {
                return Err(CliError::Input(format!("covariate {} out of range (L = {})", bad + 1, ds.l())));
            }
            ds.select_covariates(c)
        }
        None => ds,
    };
    let ms = build_moment_system(&ds, &cfg.basis)?;
    let grid = match &cfg.method_options.delta {
        DeltaSelection::Grid { points } => default_delta_grid(&ms, *points),
        DeltaSelection::Explicit { grid } | DeltaSelection::FirstFeasible { grid } => grid.clone(),
        DeltaSelection::Fixed { delta } => vec![*delta],
    };
    let t = tune_delta(&ms, &grid, &cfg.method_options.balance)?;
    let rows: Vec<Vec<String>> = t
        .path
        .iter()
        .map(|e| {
            vec![
                fmt_f64(e.delta),
                opt(e.weim),
                opt(e.effective_sample_size),
                e.converged.to_string(),
                e.error.clone().unwrap_or_default().replace(',', ";"),
            ]
        })
        .collect();
    out.csv("delta_path.csv", &["delta", "weim", "ess", "converged", "error"], &rows)?;
    out.json("tuning.json", &json!({ "delta_star": t.delta_star, "path": t.path, "result": t.result }))?;
    println!("delta* = {:.6e} (WEIM {:.6e}, ESS {:.1})", t.delta_star, t.result.weim, t.result.effective_sample_size);
    out.finish(manifest)
}

pub fn screen(data: &DataArgs, balance: &BalanceArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::resolve(data, balance, None)?;
    let (mut manifest, mut out) = start("screen", &cfg)?;
    let ds = load(&cfg, &mut manifest)?;
    let s = cfg.screening_options();
    let bal = webal::balance::BalanceConfig { delta: s.delta, ..cfg.method_options.balance.clone() };
    let r = select_subset(&ds, &bal, s.break_factor)?;
    out.json("screening.json", &r)?;
    let rows: Vec<Vec<String>> = r
        .ranking
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            vec![
                (j + 1).to_string(),
                format!("x_{}", c + 1),
                fmt_f64(r.bcor_values[c]),
                opt(r.weim_path.get(j).copied()),
            ]
        })
        .collect();
    out.csv("weim_path.csv", &["step", "covariate", "bcor", "weim"], &rows)?;
    let names: Vec<String> = r.selected_indices.iter().map(|c| format!("x_{}", c + 1)).collect();
    println!("selected {} of {}: {}", r.selected_count, ds.l(), names.join(" "));
    if let Some(reason) = &r.break_reason {
        println!("break: {reason}");
    }
    out.finish(manifest)
}

pub fn fit(data: &DataArgs, balance: &BalanceArgs, fit: &FitArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::resolve(data, balance, Some(fit))?;
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(CliError::Input(format!("--level must be in (0, 1), got {}", cfg.level)));
    }
    if cfg.bootstrap.is_some() && cfg.estimator != "linear" {
        return Err(CliError::Input("--bootstrap is available for the linear estimator only".into()));
    }
    let (mut manifest, mut out) = start("fit", &cfg)?;
    let ds = load(&cfg, &mut manifest)?;
    let pipeline = cfg.pipeline();
    let w = pipeline.weights(&ds, None)?;
    let weights = w.weights_vector();
    let estimator = default_estimators().build(&cfg.estimator, &cfg.estimator_options)?;
    let model = estimator.fit(&ds, &weights)?;
    let summary = json!({
        "method": w.method,
        "delta": w.delta,
        "weim": w.weim,
        "effective_sample_size": w.effective_sample_size,
        "converged": w.converged,
    });
    out.json("model.json", &json!({ "estimator": cfg.estimator, "weights": summary, "model": model.to_json()? }))?;

    if cfg.estimator == "linear" {
        let linear = fit_linear_effect(&ds, &weights)?;
        let names = coefficient_names(ds.p(), ds.q());
        let est = linear.coefficients();
        let var = sandwich_variance(&linear, &ds, &weights)?;
        let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + cfg.level / 2.0);
        let mut rows = Vec::new();
        // intercept first in `names`; the table lists the entries of B
        for j in 1..names.len() {
            let se = var.standard_errors[j];
            rows.push(vec![
                names[j].clone(),
                fmt_f64(est[j]),
                fmt_f64(se),
                fmt_f64(est[j] - z * se),
                fmt_f64(est[j] + z * se),
                "sandwich".into(),
            ]);
        }
        let mut table = String::new();
        let _ = writeln!(table, "{:<10}{:>12}{:>12}{:>26}", "term", "estimate", "std.err", "interval");
        if let Some(b) = cfg.bootstrap {
            let ci = bootstrap_ci(&ds, &pipeline, b, cfg.level, cfg.seed)?;
            for j in 1..names.len() {
                rows.push(vec![
                    names[j].clone(),
                    fmt_f64(ci.estimate[j]),
                    String::new(),
                    fmt_f64(ci.lower[j]),
                    fmt_f64(ci.upper[j]),
                    "bootstrap".into(),
                ]);
                let _ = writeln!(
                    table,
                    "{:<10}{:>12.4}{:>12.4}{:>26}",
                    names[j],
                    est[j],
                    var.standard_errors[j],
                    format!("({:.4}, {:.4})", ci.lower[j], ci.upper[j])
                );
            }
            out.json("bootstrap.json", &ci)?;
        } else {
            for j in 1..names.len() {
                let se = var.standard_errors[j];
                let _ = writeln!(
                    table,
                    "{:<10}{:>12.4}{:>12.4}{:>26}",
                    names[j],
                    est[j],
                    se,
                    format!("({:.4}, {:.4})", est[j] - z * se, est[j] + z * se)
                );
            }
        }
        out.csv("ci.csv", &["term", "estimate", "std_error", "lower", "upper", "method"], &rows)?;
        out.text("ci.txt", &table)?;
        print!("{table}");
    } else {
        println!("fitted {} model on n = {}", cfg.estimator, ds.n());
    }
    out.finish(manifest)
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg: StudyConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = &a.scenario {
        cfg.scenarios = s.clone();
    }
    if let Some(n) = &a.n {
        cfg.sample_sizes = n.clone();
    }
    if let Some(r) = a.reps {
        cfg.replicates = r;
    }
    if let Some(m) = &a.methods {
        cfg.methods = m.clone();
    }
    if let Some(e) = &a.estimator {
        cfg.estimator = e.clone();
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    let dir = a.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let value = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let manifest = Manifest::new("simulate", cfg.master_seed, value);
    let mut out = Outputs::new(dir)?;

    if let Some(path) = &a.export {
        let (&s, &n) = cfg
            .scenarios
            .first()
            .zip(cfg.sample_sizes.first())
            .ok_or_else(|| CliError::Input("--export needs a scenario and a sample size".into()))?;
        let (ds, _) = generate_scenario(s, n, replicate_seed(cfg.master_seed, s, n, 0))?;
        write_dataset(path, &ds)?;
        println!("wrote scenario {s}, n = {n} to {}", path.display());
        out.files.push(path.display().to_string());
        return out.finish(manifest);
    }

    let report = run_study(&cfg)?;
    write_report(&report, &mut out)?;
    out.finish(manifest)
}

fn write_report(report: &StudyReport, out: &mut Outputs) -> Result<(), CliError> {
    out.json("study.json", report)?;
    let table = report.render_table();
    out.text("table.txt", &table)?;
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.scenario.to_string(),
                c.n.to_string(),
                c.method.clone(),
                c.estimator.clone(),
                serde_json::to_value(c.metric).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                opt(c.mean),
                opt(c.sd),
                c.failures.len().to_string(),
                c.nonconverged.to_string(),
            ]
        })
        .collect();
    out.csv(
        "cells.csv",
        &["scenario", "n", "method", "estimator", "metric", "mean", "sd", "failures", "nonconverged"],
        &rows,
    )?;
    print!("{table}");
    Ok(())
}

pub fn report(input: &Path, out_dir: Option<&Path>) -> Result<(), CliError> {
    let report: StudyReport = read_json(input)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let value = serde_json::to_value(&report.config).map_err(|e| CliError::Input(e.to_string()))?;
    let mut manifest = Manifest::new("report", report.config.master_seed, value);
    manifest.add_input(input)?;
    let mut out = Outputs::new(dir)?;
    write_report(&report, &mut out)?;
    out.finish(manifest)
}
