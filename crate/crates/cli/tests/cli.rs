use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use webal::data::Dataset;
use webal_cli::io::{read_dataset, write_dataset};

fn webal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_webal"))
        .args(args)
        .current_dir(dir)
        .env_remove("WEBAL_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `n x (p q)` treatments driven by the first covariate, outcome linear in
/// the treatment.
fn synthetic(n: usize, p: usize, q: usize, l: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.sample::<f64, _>(StandardNormal);
    let x = DMatrix::from_fn(n, l, |_, _| draw());
    let mut ts = Vec::with_capacity(n);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let t = DMatrix::from_fn(p, q, |_, _| 0.5 * x[(i, 0)] + draw());
        let effect: f64 = t.iter().enumerate().map(|(k, v)| if k % 2 == 0 { *v } else { 0.0 }).sum();
        y[i] = 1.0 + effect + x[(i, 0)] + 0.5 * draw();
        ts.push(t);
    }
    Dataset::from_matrices(&ts, x, y).unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--scenario", "1", "--n", "500", "--reps", "5", "--methods", "webm,unweighted", "--seed", "7"];
    let mut a = args.to_vec();
    a.extend(["--out-dir", "a"]);
    let mut b = args.to_vec();
    b.extend(["--out-dir", "b"]);
    assert!(webal(&a, dir.path()).status.success());
    assert!(webal(&b, dir.path()).status.success());
    let first = std::fs::read(dir.path().join("a/study.json")).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("b/study.json")).unwrap());
    let report = json(dir.path().join("a/study.json"));
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c["values"].as_array().unwrap().len() == 5));
    assert!(dir.path().join("a/table.txt").exists());
    let m = json(dir.path().join("a/manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    let r = webal(&["report", "--input", "a/study.json", "--out-dir", "c"], dir.path());
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(
        std::fs::read(dir.path().join("a/table.txt")).unwrap(),
        std::fs::read(dir.path().join("c/table.txt")).unwrap()
    );
}

#[test]
fn exported_scenario_weights_respect_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let o = webal(&["simulate", "--scenario", "1", "--n", "500", "--seed", "3", "--export", "d.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = webal(&["weights", "--data", "d.csv", "--p", "3", "--q", "2", "--delta", "0.05"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let w = json(dir.path().join("webal-out/weights.json"));
    assert!(w["weim"].as_f64().unwrap() <= 0.05 + 1e-8);
    let imbalance = std::fs::read_to_string(dir.path().join("webal-out/imbalance.csv")).unwrap();
    // (1, vec T) x (1, X) minus the constant pair
    assert_eq!(imbalance.lines().count(), 1 + 7 * 6 - 1);

    // the export re-ingests value-identically
    let d = read_dataset(&dir.path().join("d.csv"), 3, 2).unwrap();
    let again = dir.path().join("again.csv");
    write_dataset(&again, &d).unwrap();
    assert_eq!(std::fs::read(dir.path().join("d.csv")).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn tune_and_screen_emit_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = webal(&["simulate", "--scenario", "5", "--n", "300", "--seed", "1", "--export", "h.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = webal(&["screen", "--data", "h.csv", "--out-dir", "s"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let path = std::fs::read_to_string(dir.path().join("s/weim_path.csv")).unwrap();
    assert_eq!(path.lines().count(), 1 + 49);
    let s = json(dir.path().join("s/screening.json"));
    assert!(s["selected_count"].as_u64().unwrap() >= 1);

    let o = webal(&["tune", "--data", "h.csv", "--covariates", "1,2,3", "--grid-points", "4", "--out-dir", "t"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let path = std::fs::read_to_string(dir.path().join("t/delta_path.csv")).unwrap();
    assert_eq!(path.lines().count(), 5);
}

#[test]
fn fit_with_bootstrap_on_six_by_shape_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("kids.csv");
    write_dataset(&data, &synthetic(103, 2, 5, 3, 11)).unwrap();
    let o = webal(&["fit", "--data", "kids.csv", "--estimator", "linear", "--bootstrap", "200", "--seed", "5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let ci = std::fs::read_to_string(dir.path().join("webal-out/ci.csv")).unwrap();
    let boot: Vec<Vec<&str>> =
        ci.lines().skip(1).map(|l| l.split(',').collect::<Vec<_>>()).filter(|r| r[5] == "bootstrap").collect();
    assert_eq!(boot.len(), 10);
    assert_eq!(boot[0][0], "b_1_1");
    assert_eq!(boot[9][0], "b_2_5");
    for r in &boot {
        let (lo, hi): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!(lo <= hi);
    }
    let b = json(dir.path().join("webal-out/bootstrap.json"));
    assert_eq!(b["replicates"], 200);
}

#[test]
fn broadcasted_fit_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, &synthetic(200, 2, 2, 2, 4)).unwrap();
    let o = webal(
        &["fit", "--data", "d.csv", "--method", "unweighted", "--estimator", "broadcasted", "--rank", "1", "--restarts", "2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(dir.path().join("webal-out/model.json"));
    assert_eq!(m["model"]["R"], 1);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, &synthetic(60, 1, 2, 2, 1)).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_webal"))
        .args(["weights", "--data", "d.csv", "--method", "unweighted"])
        .current_dir(dir.path())
        .env("WEBAL_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from-env/weights.json").exists());
    assert!(dir.path().join("from-env/manifest.json").exists());
}

#[test]
fn input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = webal(&["weights", "--data", "missing.csv", "--p", "1", "--q", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.csv"));

    let o = webal(&["weights", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    std::fs::write(dir.path().join("bad.csv"), "y,t_1_1,x_1,x_2\n1,2,3,4\n4,5,6,7\n").unwrap();
    let o = webal(&["weights", "--data", "bad.csv", "--p", "2", "--q", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expected `t_2_1`"), "{}", stderr(&o));

    let o = webal(&["weights", "--data", "bad.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--p and --q"));

    let o = webal(&["weights", "--data", "bad.csv", "--p", "1", "--q", "1", "--method", "ipw"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infeasible_balance_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, &synthetic(12, 1, 1, 8, 2)).unwrap();
    let o = webal(&["weights", "--data", "d.csv", "--method", "eb", "--basis", "squares"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
