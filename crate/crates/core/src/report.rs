//! JSON reports and CSV tables.
//!
//! JSON floats use shortest round-trip formatting; a `null` anywhere in a
//! report means a non-finite value slipped in and is rejected. CSV floats are
//! written with 17 significant digits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::limits::{Law, LimitCovariance};
use crate::linalg::{from_rows, rows, CMat};
use crate::sim::{EnsembleResult, EnsembleSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite value at {0} (NaN and infinities are not allowed in reports)")]
    NonFinite(String),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report is not a JSON object")]
    NotObject,
    #[error("schema version {found}, expected {expected}")]
    Schema { found: u64, expected: u32 },
    #[error("malformed matrix: {0}")]
    Matrix(String),
}

fn io_error(path: &Path, source: std::io::Error) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn find_null(v: &Value, path: &str) -> Option<String> {
    match v {
        Value::Null => Some(path.to_string()),
        Value::Array(a) => a.iter().enumerate().find_map(|(i, x)| find_null(x, &format!("{path}[{i}]"))),
        Value::Object(o) => o.iter().find_map(|(k, x)| find_null(x, &format!("{path}.{k}"))),
        _ => None,
    }
}

/// `{"schema_version": .., "kind": kind, ..payload}` with non-finite values rejected.
pub fn report_value<T: Serialize>(kind: &str, payload: &T) -> Result<Value, ReportError> {
    let body = serde_json::to_value(payload)?;
    let Value::Object(fields) = body else {
        return Err(ReportError::NotObject);
    };
    let mut out = Map::new();
    out.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    out.insert("kind".into(), Value::from(kind));
    out.extend(fields);
    let out = Value::Object(out);
    if let Some(at) = find_null(&out, "$") {
        return Err(ReportError::NonFinite(at));
    }
    Ok(out)
}

pub fn to_json_string(value: &Value) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(value: &Value, path: &Path) -> Result<(), ReportError> {
    let text = to_json_string(value)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> Result<String, ReportError> {
    if !x.is_finite() {
        return Err(ReportError::NonFinite(format!("{x}")));
    }
    Ok(format!("{x:.16e}"))
}

/// Writes a header row and the given rows; an empty row set gives a header-only file.
pub fn write_csv(path: &Path, header: &[String], data: &[Vec<String>]) -> Result<(), ReportError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| io_error(path, e))?);
    let mut emit = |line: String| writeln!(f, "{line}").map_err(|e| io_error(path, e));
    emit(header.join(","))?;
    for row in data {
        emit(row.join(","))?;
    }
    f.flush().map_err(|e| io_error(path, e))
}

/// Columns `replicate, grid_point, t, draws, colour_0 .. colour_{d-1}` and,
/// when death times are given, `tau`.
pub fn trajectory_table(
    spec: &EnsembleSpec,
    result: &EnsembleResult,
    tau: Option<&[Vec<f64>]>,
) -> Result<(Vec<String>, Vec<Vec<String>>), ReportError> {
    let d = spec.urn.structure().dim();
    let mut header = vec!["replicate".to_string(), "grid_point".into(), "t".into(), "draws".into()];
    header.extend((0..d).map(|i| format!("colour_{i}")));
    if tau.is_some() {
        header.push("tau".into());
    }
    let mut data = Vec::new();
    for (r, traj) in result.trajectories.iter().enumerate() {
        let points = spec.grid_times.iter().zip(&result.grid).zip(&traj.states).enumerate();
        for (k, ((t, index), x)) in points {
            let mut row = vec![r.to_string(), k.to_string(), format_f64(*t)?, index.to_string()];
            row.extend(x.iter().map(i64::to_string));
            if let Some(tau) = tau {
                row.push(format_f64(tau[r][k])?);
            }
            data.push(row);
        }
    }
    Ok((header, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexMatrix {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl ComplexMatrix {
    pub fn from_cmat(m: &CMat) -> Self {
        Self {
            re: rows(&m.map(|z| z.re)),
            im: rows(&m.map(|z| z.im)),
        }
    }

    pub fn to_cmat(&self) -> Result<CMat, ReportError> {
        let re = from_rows(&self.re).ok_or_else(|| ReportError::Matrix("ragged real part".into()))?;
        let im = from_rows(&self.im).ok_or_else(|| ReportError::Matrix("ragged imaginary part".into()))?;
        if re.shape() != im.shape() {
            return Err(ReportError::Matrix("real and imaginary parts differ in shape".into()));
        }
        Ok(CMat::from_fn(re.nrows(), re.ncols(), |i, j| Complex64::new(re[(i, j)], im[(i, j)])))
    }
}

/// Serialized form of a limit covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceJson {
    pub law: Law,
    pub times: Vec<f64>,
    pub blocks: Vec<usize>,
    pub kappa: Vec<usize>,
    pub cov: ComplexMatrix,
    pub pseudo_cov: ComplexMatrix,
    pub quad_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

impl CovarianceJson {
    pub fn from_limit(c: &LimitCovariance) -> Self {
        Self {
            law: c.law,
            times: c.times.clone(),
            blocks: c.blocks.clone(),
            kappa: c.kappa.clone(),
            cov: ComplexMatrix::from_cmat(&c.cov),
            pseudo_cov: ComplexMatrix::from_cmat(&c.pseudo_cov),
            quad_error: c.quad_error,
            horizon: c.horizon,
        }
    }

    pub fn to_limit(&self) -> Result<LimitCovariance, ReportError> {
        Ok(LimitCovariance {
            law: self.law,
            times: self.times.clone(),
            blocks: self.blocks.clone(),
            kappa: self.kappa.clone(),
            cov: self.cov.to_cmat()?,
            pseudo_cov: self.pseudo_cov.to_cmat()?,
            quad_error: self.quad_error,
            horizon: self.horizon,
        })
    }
}

pub fn covariance_report(covs: &[LimitCovariance]) -> Result<Value, ReportError> {
    #[derive(Serialize)]
    struct Payload {
        covariances: Vec<CovarianceJson>,
    }
    report_value(
        "limit-covariance",
        &Payload {
            covariances: covs.iter().map(CovarianceJson::from_limit).collect(),
        },
    )
}

pub fn parse_covariance_report(text: &str) -> Result<Vec<LimitCovariance>, ReportError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Payload {
        schema_version: u64,
        #[allow(dead_code)]
        kind: String,
        covariances: Vec<CovarianceJson>,
    }
    let p: Payload = serde_json::from_str(text)?;
    if p.schema_version != SCHEMA_VERSION as u64 {
        return Err(ReportError::Schema {
            found: p.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    p.covariances.iter().map(CovarianceJson::to_limit).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limits::LimitContext;
    use crate::urn::ReplacementStructure;

    #[test]
    fn covariance_round_trip() {
        let ctx = LimitContext::new(&ReplacementStructure::friedman(2, 1), &[0.5, 0.5]).unwrap();
        let covs = vec![ctx.cov_w1(1.0, 1.0).unwrap(), ctx.cov_ws(0.0, 0.3).unwrap(), ctx.cov_w2(0.1, 0.7).unwrap()];
        let text = to_json_string(&covariance_report(&covs).unwrap()).unwrap();
        assert_eq!(parse_covariance_report(&text).unwrap(), covs);
        assert!(text.contains("\"schema_version\": 1"));
    }

    #[test]
    fn nan_is_rejected() {
        let ctx = LimitContext::new(&ReplacementStructure::friedman(2, 1), &[0.5, 0.5]).unwrap();
        let mut c = ctx.cov_w1(1.0, 1.0).unwrap();
        c.cov[(0, 1)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(covariance_report(&[c]), Err(ReportError::NonFinite(_))));
        assert!(format_f64(f64::INFINITY).is_err());
    }

    #[test]
    fn csv_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_csv(&path, &["a".into(), "b".into()], &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n");
        let x = 0.1 + 0.2;
        let s = format_f64(x).unwrap();
        assert_eq!(s.parse::<f64>().unwrap(), x);
        let bad = Path::new("/proc/definitely/not/writable.csv");
        let err = write_csv(bad, &["a".into()], &[]).unwrap_err();
        assert!(err.to_string().contains("/proc/definitely"));
    }
}
