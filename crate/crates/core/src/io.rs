//! On-disk formats: datasets, dictionaries, matrices, operators, policies.
//!
//! All indices in files are 0-based. Dataset floats use the shortest
//! representation that round-trips exactly; matrices use 17 significant
//! digits.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::control::{FeedbackMode, Policy};
use crate::dictionary::{CenterMode, LambdaMethod, RbfDictionary};
use crate::error::{Error, Result};
use crate::systems::{ControlGrid, TrajectoryDataset};

pub fn dataset_file_name(action: usize) -> String {
    format!("data_a{action}.csv")
}

pub fn operator_file_name(action: usize) -> String {
    format!("P_a{action}.csv")
}

pub fn operator_meta_file_name(action: usize) -> String {
    format!("P_a{action}.json")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(f))
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("not a number: {s:?}"),
    })
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("not an index: {s:?}"),
    })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Header `action,dim,x0..x{q-1},y0..y{q-1}`.
pub fn write_dataset(ds: &TrajectoryDataset<f64>, path: &Path) -> Result<()> {
    let q = ds.dim();
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["action".to_string(), "dim".to_string()];
    header.extend((0..q).map(|i| format!("x{i}")));
    header.extend((0..q).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    let action = ds.action_index.to_string();
    let dim = q.to_string();
    let mut rec: Vec<String> = Vec::with_capacity(2 + 2 * q);
    for (x, y) in &ds.pairs {
        rec.clear();
        rec.push(action.clone());
        rec.push(dim.clone());
        rec.extend(x.iter().map(|v| v.to_string()));
        rec.extend(y.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset; when `expected_action` is given every row must carry it.
pub fn read_dataset(path: &Path, expected_action: Option<usize>) -> Result<TrajectoryDataset<f64>> {
    let mut rdr = csv_reader(path)?;
    let header_len = match rdr.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.len(),
        _ => return Err(Error::EmptyDataset),
    };
    let mut pairs = Vec::new();
    let mut action = expected_action;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected at least 2 columns, got {}", rec.len()),
            });
        }
        let a = parse_usize(&rec[0], line)?;
        let q = parse_usize(&rec[1], line)?;
        if rec.len() != 2 + 2 * q || rec.len() != header_len {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {} columns, got {}", 2 + 2 * q, rec.len()),
            });
        }
        match action {
            Some(expected) if expected != a => return Err(Error::ActionMismatch { expected, found: a }),
            None => action = Some(a),
            _ => {}
        }
        let vals: Vec<f64> = (2..rec.len()).map(|c| parse_f64(&rec[c], line)).collect::<Result<_>>()?;
        pairs.push((DVector::from_column_slice(&vals[..q]), DVector::from_column_slice(&vals[q..])));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(TrajectoryDataset {
        action_index: action.unwrap_or(0),
        pairs,
        source_seed: 0,
        dropped: 0,
    })
}

/// Headerless CSV with 17 significant digits.
pub fn write_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let mut line = String::new();
    for i in 0..m.nrows() {
        line.clear();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.16e}", m[(i, j)]));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    finish(w, path)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(f);
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match ncols {
            None => ncols = Some(rec.len()),
            Some(n) if n != rec.len() => {
                return Err(Error::MalformedRow {
                    line: i + 1,
                    reason: format!("expected {n} columns, got {}", rec.len()),
                })
            }
            _ => {}
        }
        for v in rec.iter() {
            data.push(parse_f64(v, i + 1)?);
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols.unwrap_or(0), &data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMeta {
    pub sigma: f64,
    pub q: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub epsilon: f64,
    pub method: LambdaMethod,
    pub center_mode: CenterMode,
}

/// Centers as CSV (`center0,…`) plus a JSON sidecar.
pub fn write_dictionary(dict: &RbfDictionary<f64>, meta: &DictionaryMeta, csv_path: &Path, meta_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(csv_path)?);
    w.write_record((0..dict.dim()).map(|i| format!("center{i}")))?;
    for c in dict.centers() {
        w.write_record(c.iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    write_json(meta, meta_path)
}

pub fn read_dictionary(csv_path: &Path, meta_path: &Path) -> Result<(RbfDictionary<f64>, DictionaryMeta)> {
    let meta: DictionaryMeta = read_json(meta_path)?;
    let mut rdr = csv_reader(csv_path)?;
    let mut centers = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != meta.q {
            return Err(Error::MalformedRow {
                line: i + 2,
                reason: format!("expected {} columns, got {}", meta.q, rec.len()),
            });
        }
        let v: Vec<f64> = rec.iter().map(|s| parse_f64(s, i + 2)).collect::<Result<_>>()?;
        centers.push(DVector::from_vec(v));
    }
    if centers.len() != meta.k {
        return Err(Error::Config(format!(
            "dictionary sidecar lists {} centers, file has {}",
            meta.k,
            centers.len()
        )));
    }
    Ok((RbfDictionary::new(centers, meta.sigma)?, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorMeta {
    pub action_index: usize,
    pub control_value: Vec<f64>,
    pub residual: f64,
    pub edmd_residual: f64,
    pub constraint_violation: f64,
    pub projection_deviation: f64,
    pub solver_status: crate::optim::SolveState,
    pub iterations: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub attractor_indices: Vec<usize>,
    pub flagged: Vec<usize>,
    pub feedback_mode: FeedbackMode,
    pub grid_snap: bool,
    pub grid: Vec<Vec<f64>>,
}

fn control_headers(d: usize) -> Vec<String> {
    if d == 1 {
        vec!["control_value".to_string()]
    } else {
        (0..d).map(|i| format!("control_value{i}")).collect()
    }
}

/// `basis_index,center0..,action_index,control_value` plus a JSON sidecar
/// holding the attractor set, flags and feedback settings.
pub fn write_policy(policy: &Policy<f64>, dict: &RbfDictionary<f64>, csv_path: &Path, meta_path: &Path) -> Result<()> {
    let q = dict.dim();
    let d = policy.grid.dim();
    let mut w = csv::Writer::from_writer(create(csv_path)?);
    let mut header = vec!["basis_index".to_string()];
    header.extend((0..q).map(|i| format!("center{i}")));
    header.push("action_index".into());
    header.extend(control_headers(d));
    w.write_record(&header)?;
    for (j, c) in dict.centers().iter().enumerate() {
        let mut rec = vec![j.to_string()];
        rec.extend(c.iter().map(|v| format!("{v:.16e}")));
        rec.push(policy.action_of[j].to_string());
        rec.extend(policy.control_of(j).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let meta = PolicyMeta {
        attractor_indices: policy.attractor_indices.clone(),
        flagged: policy.flagged.clone(),
        feedback_mode: policy.feedback_mode,
        grid_snap: policy.grid_snap,
        grid: policy.grid.values.iter().map(|v| v.iter().copied().collect()).collect(),
    };
    write_json(&meta, meta_path)
}

/// Reads a policy; returns it together with the centers listed in the file.
pub fn read_policy(csv_path: &Path, meta_path: &Path) -> Result<(Policy<f64>, Vec<DVector<f64>>)> {
    let meta: PolicyMeta = read_json(meta_path)?;
    let grid = ControlGrid::new(meta.grid.iter().map(|v| DVector::from_column_slice(v)).collect())?;
    let d = grid.dim();
    let mut rdr = csv_reader(csv_path)?;
    let header_len = rdr.headers()?.len();
    if header_len < 3 + d {
        return Err(Error::MalformedRow {
            line: 1,
            reason: "policy header too short".into(),
        });
    }
    let q = header_len - 2 - d;
    let mut action_of = Vec::new();
    let mut centers = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != header_len {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {header_len} columns, got {}", rec.len()),
            });
        }
        if parse_usize(&rec[0], line)? != i {
            return Err(Error::MalformedRow {
                line,
                reason: "basis indices must be consecutive from 0".into(),
            });
        }
        let c: Vec<f64> = (1..=q).map(|k| parse_f64(&rec[k], line)).collect::<Result<_>>()?;
        let a = parse_usize(&rec[1 + q], line)?;
        if a >= grid.len() {
            return Err(Error::MissingAction(a));
        }
        centers.push(DVector::from_vec(c));
        action_of.push(a);
    }
    Ok((
        Policy {
            action_of,
            attractor_indices: meta.attractor_indices,
            flagged: meta.flagged,
            grid,
            feedback_mode: meta.feedback_mode,
            grid_snap: meta.grid_snap,
        },
        centers,
    ))
}

/// `center0..,mu_bar` for each listed basis element.
pub fn write_mu_bar(centers: &[DVector<f64>], indices: &[usize], mu: &[f64], path: &Path) -> Result<()> {
    let q = centers.first().map_or(0, |c| c.len());
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (0..q).map(|i| format!("center{i}")).collect();
    header.push("mu_bar".into());
    w.write_record(&header)?;
    for (&j, &m) in indices.iter().zip(mu) {
        let mut rec: Vec<String> = centers[j].iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(format!("{m:.16e}"));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Generic headed CSV of floats, used for rollouts and time series.
pub fn write_table(header: &[String], rows: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::MalformedRow {
                line: i + 2,
                reason: format!("expected {} columns, got {}", header.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(|s| parse_f64(s, i + 2)).collect::<Result<_>>()?);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(dataset_file_name(3));
        let ds = TrajectoryDataset {
            action_index: 3,
            pairs: vec![
                (DVector::from_vec(vec![0.1, 1.0 / 3.0]), DVector::from_vec(vec![-2.5e-300, 7.0])),
                (DVector::from_vec(vec![f64::MIN_POSITIVE, 1e10]), DVector::from_vec(vec![0.0, -0.0])),
            ],
            source_seed: 0,
            dropped: 0,
        };
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path, Some(3)).unwrap(), ds);
        assert!(matches!(read_dataset(&path, Some(2)), Err(Error::ActionMismatch { expected: 2, found: 3 })));
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "").unwrap();
        assert!(matches!(read_dataset(&empty, None), Err(Error::EmptyDataset)));
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "action,dim,x0,y0\n0,1,0.5,0.6\n0,1,0.5\n").unwrap();
        assert!(matches!(read_dataset(&bad, None), Err(Error::MalformedRow { line: 3, .. })));
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_fn(3, 2, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0) - 0.1);
        write_matrix(&m, &path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }
}
