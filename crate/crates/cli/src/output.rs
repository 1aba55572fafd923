//! Artifact writers. Every CSV number is printed as `{:.16e}` (17
//! significant digits), so equal inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use delay_lqr_core::linalg::{self, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Rows;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Conventions block embedded in every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub feedback: String,
    pub gain_sign: String,
    pub predictor: String,
    pub matrix_layout: String,
    pub time_unit: String,
    pub cost: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            feedback: "u(t) = K(t) yhat(t|t)".into(),
            gain_sign: "K = -Omega^{-1} B' Phat; the minus sign is part of K".into(),
            predictor: "yhat(t|t) = x(t) + sum_i int_{t-h_i}^{t} e^{-A(s-t+h_i)} B_i u(s) ds, \
                        zero-order hold on the grid"
                .into(),
            matrix_layout: "row-major nested arrays; CSV columns NAME_ij".into(),
            time_unit: "same unit as the delays and the horizon".into(),
            cost:
                "E[ int_0^T e^{-alpha t}(y'Qy + u'Ru) dt + y(T)'H y(T) ], H dropped when alpha > 0"
                    .into(),
        }
    }
}

/// Formats one CSV field.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column names `NAME_ij` for an `r × c` matrix, row-major.
pub fn matrix_header(name: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| format!("{name}_{i}{j}")))
        .collect()
}

/// Appends the entries of `m` row-major.
pub fn push_matrix(row: &mut Vec<f64>, m: &Matrix) {
    row.extend_from_slice(m.as_slice());
}

pub fn csv_text(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        for (i, v) in r.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", num(*v));
        }
        s.push('\n');
    }
    s
}

pub fn write_file(path: &Path, text: &str) -> Result<(), OutputError> {
    let io = |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_file(path, &text)
}

/// Stationary matrices as stored in `certificate.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainRecord {
    pub alpha: f64,
    pub phat: Rows,
    pub p: Rows,
    pub pi0: Rows,
    pub omega: Rows,
    pub k: Rows,
    pub residual: f64,
    pub iterations: usize,
    pub min_eig_phat: f64,
    pub min_eig_p_minus_phat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub conventions: Conventions,
    pub weights: String,
    pub alpha_hi: f64,
    pub tol: f64,
    pub alpha_max: f64,
    /// Gain solving the discounted stationary equations at `alpha_max`.
    pub certified: GainRecord,
    /// Gain at `alpha = 0`.
    pub base: GainRecord,
}

#[derive(Debug, Error, PartialEq)]
pub enum CertificateError {
    #[error("malformed certificate: {0}")]
    Parse(String),
    #[error("certificate check failed: {0}")]
    Check(String),
}

/// Slack for recomputed eigenvalues, relative to the matrix scale.
const EIG_SLACK: f64 = 1e-8;

fn square(name: &str, rows: &Rows, n: usize) -> Result<Matrix, CertificateError> {
    let m = Matrix::from_rows(rows).map_err(|e| CertificateError::Parse(format!("{name}: {e}")))?;
    if m.rows() != n || m.cols() != n {
        return Err(CertificateError::Check(format!("{name} is not {n}x{n}")));
    }
    if !m.is_finite() {
        return Err(CertificateError::Check(format!(
            "{name} has non-finite entries"
        )));
    }
    Ok(m)
}

impl GainRecord {
    /// Recomputes `min eig P̂ > 0` and `P ⪰ P̂` and compares with the stored
    /// values.
    pub fn check(&self, label: &str) -> Result<Matrix, CertificateError> {
        let n = self.phat.len();
        if n == 0 {
            return Err(CertificateError::Check(format!("{label}: empty Phat")));
        }
        let phat = square("phat", &self.phat, n)?;
        let p = square("p", &self.p, n)?;
        square("pi0", &self.pi0, n)?;
        let k = Matrix::from_rows(&self.k)
            .map_err(|e| CertificateError::Parse(format!("{label}.k: {e}")))?;
        if k.cols() != n || !k.is_finite() {
            return Err(CertificateError::Check(format!(
                "{label}: K has wrong shape"
            )));
        }
        let scale = p.norm_max().max(1.0);
        if phat.asymmetry() > EIG_SLACK * scale || p.asymmetry() > EIG_SLACK * scale {
            return Err(CertificateError::Check(format!(
                "{label}: P or Phat not symmetric"
            )));
        }
        let eig = |m: &Matrix| {
            linalg::min_eigenvalue(m).map_err(|e| CertificateError::Check(format!("{label}: {e}")))
        };
        let lo_hat = eig(&phat)?;
        let lo_gap = eig(&(&p - &phat))?;
        if lo_hat.is_nan() || lo_hat <= 0.0 {
            return Err(CertificateError::Check(format!(
                "{label}: Phat is not positive definite (min eigenvalue {lo_hat:e})"
            )));
        }
        if lo_gap < -EIG_SLACK * scale {
            return Err(CertificateError::Check(format!(
                "{label}: P - Phat has eigenvalue {lo_gap:e}"
            )));
        }
        let tol = EIG_SLACK * scale;
        if (lo_hat - self.min_eig_phat).abs() > tol
            || (lo_gap - self.min_eig_p_minus_phat).abs() > tol
        {
            return Err(CertificateError::Check(format!(
                "{label}: stored eigenvalues disagree with recomputed ones"
            )));
        }
        Ok(k)
    }
}

impl CertificateFile {
    /// Parses and self-checks a certificate.
    pub fn parse(text: &str) -> Result<Self, CertificateError> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| CertificateError::Parse(e.to_string()))?;
        if !(c.alpha_max.is_finite() && c.alpha_max >= 0.0) {
            return Err(CertificateError::Check("alpha_max must be >= 0".into()));
        }
        if c.alpha_max > c.alpha_hi {
            return Err(CertificateError::Check("alpha_max exceeds alpha_hi".into()));
        }
        if c.certified.alpha != c.alpha_max || c.base.alpha != 0.0 {
            return Err(CertificateError::Check(
                "gain records carry the wrong rates".into(),
            ));
        }
        c.certified.check("certified")?;
        c.base.check("base")?;
        if c.certified.phat.len() != c.base.phat.len() {
            return Err(CertificateError::Check(
                "gain records differ in size".into(),
            ));
        }
        Ok(c)
    }

    pub fn gain(&self) -> Matrix {
        Matrix::from_rows(&self.certified.k).expect("checked on load")
    }
}
