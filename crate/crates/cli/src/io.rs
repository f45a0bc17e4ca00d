//! Flat CSV datasets: `y, t_1_1 .. t_p_q, x_1 .. x_L`, treatment entries in
//! row-major order.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use webal::data::Dataset;

use crate::error::CliError;

/// Formats a double with 17 significant digits, enough to round-trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn header(p: usize, q: usize, l: usize) -> Vec<String> {
    let mut h = vec!["y".to_string()];
    for i in 1..=p {
        for j in 1..=q {
            h.push(format!("t_{i}_{j}"));
        }
    }
    h.extend((1..=l).map(|k| format!("x_{k}")));
    h
}

/// Treatment dimensions kept next to a data file as `<data>.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub p: usize,
    pub q: usize,
}

pub fn sidecar_path(data: &Path) -> std::path::PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_sidecar(data: &Path) -> Result<Option<Sidecar>, CliError> {
    let path = sidecar_path(data);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Input(format!("{}: not a {{\"p\", \"q\"}} sidecar: {e}", path.display())))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let (p, q, l) = (data.p(), data.q(), data.l());
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
    w.write_record(header(p, q, l)).map_err(csv_err)?;
    let mut record = Vec::with_capacity(1 + p * q + l);
    for r in 0..data.n() {
        record.clear();
        record.push(fmt_f64(data.outcomes()[r]));
        for i in 0..p {
            for j in 0..q {
                record.push(fmt_f64(data.treatments()[(r, j * p + i)]));
            }
        }
        record.extend(data.covariates().row(r).iter().map(|v| fmt_f64(*v)));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    write_sidecar(path, p, q)
}

fn write_sidecar(data: &Path, p: usize, q: usize) -> Result<(), CliError> {
    let path = sidecar_path(data);
    let mut f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(&Sidecar { p, q }).expect("plain struct"))
        .map_err(|e| CliError::io(&path, e))
}

pub fn read_dataset(path: &Path, p: usize, q: usize) -> Result<Dataset, CliError> {
    let name = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
    let cols: Vec<String> = r
        .headers()
        .map_err(|e| CliError::Input(format!("{name}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let pq = p * q;
    if p == 0 || q == 0 {
        return Err(CliError::Input(format!("treatment dims must be positive, got {p}x{q}")));
    }
    if cols.len() < 2 + pq {
        return Err(CliError::Input(format!(
            "{name}: {} columns cannot hold y, {pq} treatment entries and a covariate",
            cols.len()
        )));
    }
    let l = cols.len() - 1 - pq;
    let expected = header(p, q, l);
    if let Some((k, (got, want))) = cols.iter().zip(&expected).enumerate().find(|(_, (g, w))| g != w) {
        return Err(CliError::Input(format!(
            "{name}: column {} is `{got}`, expected `{want}` for p = {p}, q = {q}",
            k + 1
        )));
    }

    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut x = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{name}: {e}")))?;
        if rec.len() != cols.len() {
            return Err(CliError::Input(format!(
                "{name}: data row {} has {} fields, header has {}",
                row + 1,
                rec.len(),
                cols.len()
            )));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Input(format!("{name}: data row {}, column `{}`: `{field}` is not a number", row + 1, cols[k]))
            })?;
            if !v.is_finite() {
                return Err(CliError::Input(format!(
                    "{name}: data row {}, column `{}` is not finite",
                    row + 1,
                    cols[k]
                )));
            }
            vals.push(v);
        }
        y.push(vals[0]);
        // row-major file order to column-major vec(T)
        let mut tv = vec![0.0; pq];
        for i in 0..p {
            for j in 0..q {
                tv[j * p + i] = vals[1 + i * q + j];
            }
        }
        t.extend(tv);
        x.extend_from_slice(&vals[1 + pq..]);
    }
    let n = y.len();
    let treatments = DMatrix::from_row_slice(n, pq, &t);
    let covariates = DMatrix::from_row_slice(n, l, &x);
    Dataset::new(p, q, treatments, covariates, DVector::from_vec(y)).map_err(|e| CliError::Input(format!("{name}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_row_major() {
        assert_eq!(header(2, 2, 1), vec!["y", "t_1_1", "t_1_2", "t_2_1", "t_2_2", "x_1"]);
    }

    #[test]
    fn seventeen_significant_digits() {
        let s = fmt_f64(0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let t = vec![
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            DMatrix::from_row_slice(2, 3, &[-1.0, 1.0 / 3.0, 0.0, 7.5, 1e-300, -2.0]),
        ];
        let x = DMatrix::from_row_slice(2, 2, &[0.25, std::f64::consts::PI, -1.0, 2.0]);
        let d = Dataset::from_matrices(&t, x, DVector::from_vec(vec![0.1, -3.0])).unwrap();
        write_dataset(&path, &d).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().nth(1).unwrap();
        assert!(first.starts_with("1.0000000000000001e-1,1.0000000000000000e0,2.0000000000000000e0,3.0"));
        assert_eq!(read_sidecar(&path).unwrap(), Some(Sidecar { p: 2, q: 3 }));
        assert_eq!(read_dataset(&path, 2, 3).unwrap(), d);
    }

    #[test]
    fn rejects_wrong_dims_and_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,t_1_1,t_1_2,x_1\n1,2,3,4\n5,6,7,8\n").unwrap();
        assert!(read_dataset(&path, 1, 2).is_ok());
        let e = read_dataset(&path, 2, 1).unwrap_err().to_string();
        assert!(e.contains("expected `t_2_1`"), "{e}");
        std::fs::write(&path, "y,t_1_1,t_1_2,x_1\n1,2,abc,4\n").unwrap();
        let e = read_dataset(&path, 1, 2).unwrap_err().to_string();
        assert!(e.contains("`abc` is not a number"), "{e}");
        std::fs::write(&path, "y,t_1_1,t_1_2,x_1\n1,2,3\n").unwrap();
        assert!(read_dataset(&path, 1, 2).is_err());
    }
}
