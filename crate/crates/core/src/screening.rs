//! Covariate screening for high-dimensional confounders: rank covariates by
//! ball correlation with the matrix treatment, then grow the balancing
//! basis one covariate at a time until the achieved WEIM jumps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{solve_weights, BalanceConfig};
use crate::basis::{BasisSpec, CovariateBasis};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moments::build_moment_system;

/// Slack added to the break-point comparison.
pub const BREAK_SLACK: f64 = 1e-8;
pub const DEFAULT_BREAK_FACTOR: f64 = 2.0;

/// Per-observation distance profiles: `rows[i][k] = d(Z_i, Z_k)`.
struct Distances {
    rows: Vec<Vec<f64>>,
}

impl Distances {
    fn scalar(x: &[f64]) -> Self {
        Self {
            rows: x.iter().map(|xi| x.iter().map(|xk| (xi - xk).abs()).collect()).collect(),
        }
    }

    /// Frobenius distance between flattened matrices.
    fn rows_of(m: &nalgebra::DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut rows = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in i + 1..n {
                let d = (m.row(i) - m.row(k)).norm();
                rows[i][k] = d;
                rows[k][i] = d;
            }
        }
        Self { rows }
    }

    fn n(&self) -> usize {
        self.rows.len()
    }
}

/// For one centre `i`: `#{k : a_k <= a_j}` for every `j`.
fn rank_counts(a: &[f64]) -> Vec<u32> {
    let mut sorted = a.to_vec();
    sorted.sort_by(f64::total_cmp);
    a.iter().map(|v| sorted.partition_point(|s| s <= v) as u32).collect()
}

/// For one centre: `#{k : a_k <= a_j and b_k <= b_j}` for every `j`, by a
/// sweep over `a` with a Fenwick tree over the ranks of `b`.
fn dominance_counts(a: &[f64], b: &[f64]) -> Vec<u32> {
    let n = a.len();
    let mut b_sorted = b.to_vec();
    b_sorted.sort_by(f64::total_cmp);
    // 1-based rank of the last element <= b_j, so ties count as dominated
    let b_rank: Vec<usize> = b.iter().map(|v| b_sorted.partition_point(|s| s <= v)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[x].total_cmp(&a[y]));

    let mut tree = vec![0u32; n + 1];
    let mut out = vec![0u32; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && a[order[end]] == a[order[start]] {
            end += 1;
        }
        for &k in &order[start..end] {
            let mut r = b_rank[k];
            while r <= n {
                tree[r] += 1;
                r += r & r.wrapping_neg();
            }
        }
        for &j in &order[start..end] {
            let mut r = b_rank[j];
            let mut s = 0;
            while r > 0 {
                s += tree[r];
                r -= r & r.wrapping_neg();
            }
            out[j] = s;
        }
        start = end;
    }
    out
}

/// `(BCov^2(X,Y), BCov^2(X,X), BCov^2(Y,Y))`. Sums are accumulated on
/// integer counts, so the result does not depend on observation order.
fn ball_covariances(dx: &Distances, dy: &Distances) -> (f64, f64, f64) {
    let n = dx.n();
    let nn = n as i128;
    let (mut xy, mut xx, mut yy) = (0i128, 0i128, 0i128);
    for i in 0..n {
        let cx = rank_counts(&dx.rows[i]);
        let cy = rank_counts(&dy.rows[i]);
        let cxy = dominance_counts(&dx.rows[i], &dy.rows[i]);
        for j in 0..n {
            let (a, b, ab) = (cx[j] as i128, cy[j] as i128, cxy[j] as i128);
            xy += (nn * ab - a * b).pow(2);
            xx += (nn * a - a * a).pow(2);
            yy += (nn * b - b * b).pow(2);
        }
    }
    // each term carries n^4, plus the outer n^-2
    let scale = (n as f64).powi(6);
    (xy as f64 / scale, xx as f64 / scale, yy as f64 / scale)
}

fn bcor_from(dx: &Distances, dy: &Distances) -> Result<f64> {
    let (xy, xx, yy) = ball_covariances(dx, dy);
    if !(xx > 0.0) || !(yy > 0.0) {
        let which = if xx > 0.0 { "treatment" } else { "covariate" };
        return Err(Error::DegenerateDistance(format!("{which} takes a single value")));
    }
    let r = xy / (xx * yy).sqrt();
    Ok(if r < 0.0 && r >= -1e-12 { 0.0 } else { r.clamp(0.0, 1.0) })
}

/// Sample ball correlation between a scalar covariate and the matrix
/// treatment (rows of `treatments` are flattened `T_i`), using absolute
/// distance on `x` and Frobenius distance on `T`.
pub fn ball_correlation(x: &[f64], treatments: &nalgebra::DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Input(format!("ball correlation needs n >= 3, got {n}")));
    }
    if treatments.nrows() != n {
        return Err(Error::LengthMismatch { expected: n, got: treatments.nrows() });
    }
    if x.iter().chain(treatments.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("ball correlation input is not finite".into()));
    }
    bcor_from(&Distances::scalar(x), &Distances::rows_of(treatments))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRanking {
    /// Covariate indices (0-based) by decreasing ball correlation.
    pub ranking: Vec<usize>,
    /// Ball correlation of each covariate, indexed by original position.
    pub bcor_values: Vec<f64>,
}

/// Ranks covariates by decreasing ball correlation with the treatment.
/// Degenerate (constant) covariates get a value of 0; ties go to the lower
/// index.
pub fn rank_covariates(data: &Dataset) -> Result<CovariateRanking> {
    if data.n() < 3 {
        return Err(Error::Input(format!("ranking needs n >= 3, got {}", data.n())));
    }
    if !data.is_finite() {
        return Err(Error::Input("dataset contains non-finite values".into()));
    }
    let dy = Distances::rows_of(data.treatments());
    if dy.rows.iter().all(|r| r.iter().all(|d| *d == 0.0)) {
        return Err(Error::DegenerateDistance("all treatments are identical".into()));
    }
    let bcor_values: Vec<f64> = (0..data.l())
        .into_par_iter()
        .map(|j| {
            let x: Vec<f64> = data.covariates().column(j).iter().copied().collect();
            match bcor_from(&Distances::scalar(&x), &dy) {
                Ok(v) => Ok(v),
                Err(Error::DegenerateDistance(_)) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut ranking: Vec<usize> = (0..data.l()).collect();
    ranking.sort_by(|&a, &b| bcor_values[b].total_cmp(&bcor_values[a]).then(a.cmp(&b)));
    Ok(CovariateRanking { ranking, bcor_values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub ranking: Vec<usize>,
    /// Ball correlation per covariate, by original index.
    pub bcor_values: Vec<f64>,
    /// WEIM after balancing on the top `j` covariates, `j = 1, 2, ...`, for
    /// every step that solved.
    pub weim_path: Vec<f64>,
    pub selected_count: usize,
    pub selected_indices: Vec<usize>,
    /// 1-based step at which the break was declared, if any.
    pub break_step: Option<usize>,
    pub break_reason: Option<String>,
}

/// First break in a WEIM path: step `j` (1-based) breaks when its value is
/// missing (the solve failed) or exceeds `break_factor` times the running
/// maximum plus [`BREAK_SLACK`]. Returns the number of covariates kept.
pub fn detect_break(path: &[Option<f64>], break_factor: f64) -> usize {
    let mut running: Option<f64> = None;
    for (j, v) in path.iter().enumerate() {
        match (v, running) {
            (None, _) => return j.max(1),
            (Some(w), Some(m)) if *w > break_factor * m + BREAK_SLACK => return j,
            (Some(w), _) => running = Some(running.map_or(*w, |m| m.max(*w))),
        }
    }
    path.len()
}

/// Sequential subset selection over the ranked covariates with the basis
/// `(1, X_(1), ..., X_(j))` and the fixed threshold `cfg.delta`.
pub fn select_subset(data: &Dataset, cfg: &BalanceConfig, break_factor: f64) -> Result<ScreeningResult> {
    if !(break_factor > 1.0) || !break_factor.is_finite() {
        return Err(Error::Parameter(format!("break_factor must be > 1, got {break_factor}")));
    }
    cfg.validate()?;
    let CovariateRanking { ranking, bcor_values } = rank_covariates(data)?;
    let spec = BasisSpec::new(CovariateBasis::Linear);

    let mut path: Vec<Option<f64>> = Vec::new();
    let mut weim_path = Vec::new();
    let mut break_reason = None;
    for j in 1..=ranking.len() {
        let subset = data.select_covariates(&ranking[..j]);
        let solved = build_moment_system(&subset, &spec).and_then(|ms| solve_weights(&ms, cfg));
        match solved {
            Ok(r) if r.converged => {
                path.push(Some(r.weim));
                weim_path.push(r.weim);
            }
            Ok(r) => {
                path.push(None);
                break_reason = Some(format!("solver did not converge (gradient {:.3e})", r.gradient_norm));
            }
            Err(e) => {
                path.push(None);
                break_reason = Some(e.to_string());
            }
        }
        let kept = detect_break(&path, break_factor);
        if kept < path.len() || path[j - 1].is_none() {
            if break_reason.is_none() {
                break_reason = Some(format!("WEIM jumped to {:.3e}", weim_path[j - 1]));
            }
            let selected_indices = ranking[..kept].to_vec();
            return Ok(ScreeningResult {
                ranking,
                bcor_values,
                weim_path,
                selected_count: kept,
                selected_indices,
                break_step: Some(j),
                break_reason,
            });
        }
        break_reason = None;
    }
    let l = ranking.len();
    Ok(ScreeningResult {
        selected_indices: ranking.clone(),
        ranking,
        bcor_values,
        weim_path,
        selected_count: l,
        break_step: None,
        break_reason: None,
    })
}

/// Convenience: the dataset restricted to the screened covariates.
pub fn screened_dataset(data: &Dataset, result: &ScreeningResult) -> Dataset {
    data.select_covariates(&result.selected_indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_counts(a: &[f64], b: &[f64]) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
        let n = a.len();
        let mut ca = vec![0; n];
        let mut cb = vec![0; n];
        let mut cab = vec![0; n];
        for j in 0..n {
            for k in 0..n {
                let ia = a[k] <= a[j];
                let ib = b[k] <= b[j];
                ca[j] += ia as u32;
                cb[j] += ib as u32;
                cab[j] += (ia && ib) as u32;
            }
        }
        (ca, cb, cab)
    }

    fn naive_bcor(x: &[f64], t: &DMatrix<f64>) -> f64 {
        let n = x.len();
        let dx = Distances::scalar(x);
        let dy = Distances::rows_of(t);
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let (mut a, mut b, mut ab) = (0.0, 0.0, 0.0);
                for k in 0..n {
                    let ia = dx.rows[i][k] <= dx.rows[i][j];
                    let ib = dy.rows[i][k] <= dy.rows[i][j];
                    a += ia as u8 as f64;
                    b += ib as u8 as f64;
                    ab += (ia && ib) as u8 as f64;
                }
                let (a, b, ab) = (a / n as f64, b / n as f64, ab / n as f64);
                xy += (ab - a * b).powi(2);
                xx += (a - a * a).powi(2);
                yy += (b - b * b).powi(2);
            }
        }
        xy / (xx * yy).sqrt()
    }

    fn random_instance(n: usize, seed: u64) -> (Vec<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t = DMatrix::from_fn(n, 6, |i, _| x[i] + rng.random::<f64>());
        (x, t)
    }

    #[test]
    fn counts_match_naive_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // coarse values to force ties
            let a: Vec<f64> = (0..20).map(|_| (rng.random::<f64>() * 6.0).floor()).collect();
            let b: Vec<f64> = (0..20).map(|_| (rng.random::<f64>() * 6.0).floor()).collect();
            let (ca, cb, cab) = naive_counts(&a, &b);
            assert_eq!(rank_counts(&a), ca);
            assert_eq!(rank_counts(&b), cb);
            assert_eq!(dominance_counts(&a, &b), cab);
        }
    }

    #[test]
    fn matches_naive_statistic() {
        let (x, t) = random_instance(20, 8);
        let fast = ball_correlation(&x, &t).unwrap();
        assert!((fast - naive_bcor(&x, &t)).abs() < 1e-12);
    }

    #[test]
    fn self_correlation_is_one() {
        let (x, _) = random_instance(30, 1);
        let t = DMatrix::from_column_slice(30, 1, &x);
        assert!((ball_correlation(&x, &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant() {
        let (x, t) = random_instance(25, 2);
        let perm: Vec<usize> = (0..25).rev().collect();
        let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let tp = t.select_rows(&perm);
        assert_eq!(ball_correlation(&x, &t).unwrap(), ball_correlation(&xp, &tp).unwrap());
    }

    #[test]
    fn independent_inputs_pass_permutation_test() {
        let mut passes = 0;
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 100;
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let t = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
            let observed = ball_correlation(&x, &t).unwrap();
            let mut null: Vec<f64> = (0..50)
                .map(|_| {
                    let mut xp = x.clone();
                    for i in (1..n).rev() {
                        xp.swap(i, rng.random_range(0..=i));
                    }
                    ball_correlation(&xp, &t).unwrap()
                })
                .collect();
            null.sort_by(f64::total_cmp);
            if observed < null[47] {
                passes += 1;
            }
        }
        assert!(passes >= 36, "{passes}/40");
    }

    #[test]
    fn degenerate_inputs() {
        let t = DMatrix::from_fn(5, 2, |i, j| (i + j) as f64);
        assert!(matches!(ball_correlation(&[1.0; 5], &t), Err(Error::DegenerateDistance(_))));
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(ball_correlation(&x, &DMatrix::zeros(5, 2)), Err(Error::DegenerateDistance(_))));
        assert!(ball_correlation(&x[..2], &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn ranking_ties_and_single_covariate() {
        let (x, t) = random_instance(30, 4);
        let cov = DMatrix::from_fn(30, 3, |i, j| if j == 1 { 0.5 } else { x[i] });
        let d = Dataset::new(3, 2, t.clone(), cov, DVector::zeros(30)).unwrap();
        let r = rank_covariates(&d).unwrap();
        assert_eq!(r.ranking, vec![0, 2, 1]);
        assert!((r.bcor_values[0] - r.bcor_values[2]).abs() < 1e-12);
        assert_eq!(r.bcor_values[1], 0.0);

        let one = Dataset::new(3, 2, t, DMatrix::from_column_slice(30, 1, &x), DVector::zeros(30)).unwrap();
        assert_eq!(rank_covariates(&one).unwrap().ranking, vec![0]);
        let s = select_subset(&one, &BalanceConfig::with_delta(0.01), 2.0).unwrap();
        assert_eq!(s.selected_count, 1);
    }

    #[test]
    fn break_rules() {
        let flat = vec![Some(0.01); 6];
        assert_eq!(detect_break(&flat, 2.0), 6);
        let planted = [0.01, 0.012, 0.011, 0.12, 0.13].map(Some);
        assert_eq!(detect_break(&planted, 2.0), 3);
        let failed = [Some(0.01), Some(0.01), None];
        assert_eq!(detect_break(&failed, 2.0), 2);
        assert_eq!(detect_break(&[None], 2.0), 1);
    }

    #[test]
    fn rejects_bad_break_factor() {
        let (x, t) = random_instance(30, 4);
        let d = Dataset::new(3, 2, t, DMatrix::from_column_slice(30, 1, &x), DVector::zeros(30)).unwrap();
        assert!(select_subset(&d, &BalanceConfig::with_delta(0.01), 1.0).is_err());
    }
}
