//! Simulation lab: scenario generators with known truth, oracle weights,
//! and the replicated study runner.

mod oracle;
mod scenario;
mod study;

pub use oracle::oracle_weights;
pub use scenario::{
    f1, generate_from_truth, generate_scenario, generate_scenario_with, reference_b, Confounding, GenerateOptions, ScenarioTruth,
    COVARIATE_CORRELATION, OUTCOME_NOISE_SD, TREATMENT_NOISE_SD,
};
pub use study::{
    replicate_seed, run_study, Metric, ReplicateFailure, StudyCell, StudyConfig, StudyReport,
};
