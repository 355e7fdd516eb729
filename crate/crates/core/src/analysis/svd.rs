//! One-sided Jacobi SVD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAX_SWEEPS: usize = 60;

/// `W = U diag(s) Vᵀ` with `s` descending; `U` is `rows × r`, `V` is
/// `cols × r`, `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

pub fn svd(w: &Matrix) -> Result<Svd> {
    if !w.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    if w.rows() < w.cols() {
        let t = svd(&w.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let (m, n) = w.shape();
    // columns of W, rotated in place until mutually orthogonal
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let eps = f64::EPSILON;

    for sweep in 0..=MAX_SWEEPS {
        if sweep == MAX_SWEEPS {
            return Err(Error::Numeric("Jacobi SVD did not converge".into()));
        }
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (alpha, beta) = (norms[i], norms[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma: f64 = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = a.split_at_mut(j);
                for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
                let (left, right) = v.split_at_mut(j);
                for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
                norms[i] = a[i].iter().map(|x| x * x).sum();
                norms[j] = a[j].iter().map(|x| x * x).sum();
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sigma: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    let s: Vec<f64> = order.iter().map(|&k| sigma[k]).collect();
    let u = Matrix::from_fn(m, n, |i, k| {
        let col = order[k];
        if sigma[col] > 0.0 {
            a[col][i] / sigma[col]
        } else {
            0.0
        }
    });
    let vm = Matrix::from_fn(n, n, |i, k| v[order[k]][i]);
    Ok(Svd { u, s, v: vm })
}

pub fn singular_values(w: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(w)?.s)
}

/// Singular spectrum and `‖W‖_F² / ‖W‖₂²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub stable_rank: f64,
    pub rows: usize,
    pub cols: usize,
}

pub fn stable_rank(w: &Matrix) -> Result<SpectrumReport> {
    let s = singular_values(w)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let fro: f64 = s.iter().map(|x| (x / top) * (x / top)).sum();
    Ok(SpectrumReport {
        stable_rank: fro,
        singular_values: s,
        rows: w.rows(),
        cols: w.cols(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let r = stable_rank(&Matrix::identity(4)).unwrap();
        assert_eq!(r.singular_values, vec![1.0; 4]);
        assert!((r.stable_rank - 4.0).abs() < 1e-15);
        let r = stable_rank(&Matrix::diag(&[1.0, 2.0])).unwrap();
        assert_eq!(r.singular_values, vec![2.0, 1.0]);
        assert!((r.stable_rank - 1.25).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_is_an_error() {
        assert!(matches!(stable_rank(&Matrix::zeros(3, 2)), Err(Error::ZeroMatrix)));
        assert_eq!(singular_values(&Matrix::zeros(3, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.3, 4.0]).unwrap();
        let d = svd(&w).unwrap();
        assert_eq!((d.u.shape(), d.v.shape()), ((2, 2), (3, 2)));
        let back = d.u.matmul(&Matrix::diag(&d.s)).unwrap().matmul(&d.v.transpose()).unwrap();
        assert!(back.sub(&w).unwrap().frobenius_norm() < 1e-14);
    }
}
