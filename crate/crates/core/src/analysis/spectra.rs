//! Weight-matrix ingestion and spectra of learned product perturbations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::svd::{singular_values, stable_rank};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::objective::sidecar_path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixHeader {
    pub rows: usize,
    pub cols: usize,
}

/// Comma-separated rows, no header.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(Error::format(path, format!("line {} has {} columns, expected {c}", lineno + 1, values.len())))
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(path, "empty matrix file"))?;
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Row-major little-endian f64 with a `<path>.json` `{rows, cols}` sidecar.
pub fn read_matrix_raw(path: &Path) -> Result<Matrix> {
    let header_path = sidecar_path(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: MatrixHeader = serde_json::from_str(&text).map_err(|e| Error::format(&header_path, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.rows * header.cols * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {}x{}, found {}", header.rows * header.cols * 8, header.rows, header.cols, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    Matrix::from_vec(header.rows, header.cols, data)
}

pub fn write_matrix_raw(m: &Matrix, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header_path = sidecar_path(path);
    let header = serde_json::to_string(&MatrixHeader {
        rows: m.rows(),
        cols: m.cols(),
    })
    .expect("header serializes");
    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))
}

/// `.csv` files are read as CSV, anything else as raw.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let m = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_matrix_csv(path)?
    } else {
        read_matrix_raw(path)?
    };
    if !m.is_finite() {
        return Err(Error::format(path, "matrix has non-finite entries"));
    }
    Ok(m)
}

/// One checkpoint of an attention head; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub iteration: u64,
    pub w_k: PathBuf,
    pub w_q: PathBuf,
    pub w_v: PathBuf,
    pub w_o: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub checkpoints: Vec<CheckpointEntry>,
}

pub struct Checkpoint {
    pub iteration: u64,
    pub w_k: Matrix,
    pub w_q: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.checkpoints.is_empty() {
            return Err(Error::format(path, "manifest lists no checkpoints"));
        }
        Ok(m)
    }

    pub fn load(&self, entry: &CheckpointEntry, base: &Path) -> Result<Checkpoint> {
        let load = |p: &Path| read_matrix(&base.join(p));
        Ok(Checkpoint {
            iteration: entry.iteration,
            w_k: load(&entry.w_k)?,
            w_q: load(&entry.w_q)?,
            w_v: load(&entry.w_v)?,
            w_o: load(&entry.w_o)?,
        })
    }
}

/// `A Bᵀ − A₀ B₀ᵀ`.
pub fn product_difference(a: &Matrix, b: &Matrix, a0: &Matrix, b0: &Matrix) -> Result<Matrix> {
    let now = a.matmul(&b.transpose())?;
    let init = a0.matmul(&b0.transpose())?;
    now.sub(&init)
}

/// Stable rank and leading singular values of one product difference.
/// A zero difference is reported with `stable_rank = 0` and `zero = true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSpectrum {
    pub stable_rank: f64,
    pub zero: bool,
    /// Number of singular values above the threshold.
    pub rank_above_tau: usize,
    pub singular_values: Vec<f64>,
}

pub fn delta_spectrum(delta: &Matrix, tau: f64) -> Result<DeltaSpectrum> {
    match stable_rank(delta) {
        Ok(r) => Ok(DeltaSpectrum {
            stable_rank: r.stable_rank,
            zero: false,
            rank_above_tau: r.singular_values.iter().filter(|&&s| s > tau).count(),
            singular_values: r.singular_values,
        }),
        Err(Error::ZeroMatrix) => Ok(DeltaSpectrum {
            stable_rank: 0.0,
            zero: true,
            rank_above_tau: 0,
            singular_values: singular_values(delta)?,
        }),
        Err(e) => Err(e),
    }
}

/// Haar-distributed orthogonal `n × n` matrix (Gram–Schmidt on Gaussian
/// columns, twice for stability).
pub fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for q in &cols {
                let proj = dot(&c, q);
                for (x, y) in c.iter_mut().zip(q) {
                    *x -= proj * y;
                }
            }
        }
        let nrm = crate::linalg::norm(&c);
        if nrm < 1e-8 {
            continue;
        }
        c.iter_mut().for_each(|x| *x /= nrm);
        cols.push(c);
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}

/// `Q₁ diag(σ) Q₂ᵀ` restricted to `rows × cols`, with Haar `Q₁`, `Q₂`.
pub fn planted_matrix(rows: usize, cols: usize, sigma: &[f64], seed: u64) -> Result<Matrix> {
    if sigma.len() > rows.min(cols) {
        return Err(Error::invalid("more singular values than min(rows, cols)"));
    }
    let q1 = random_orthogonal(rows, seed);
    let q2 = random_orthogonal(cols, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    Ok(Matrix::from_fn(rows, cols, |i, j| {
        sigma.iter().enumerate().map(|(k, s)| q1[(i, k)] * s * q2[(j, k)]).sum()
    }))
}
