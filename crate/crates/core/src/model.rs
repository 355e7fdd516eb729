//! Smooth models `h(x; c)` that depend on their weights only through the
//! product vector `c = u ⊙ v`.
//!
//! Two kinds are supported:
//!
//! * `LinearDiagonal`: `h(x; c) = Σ c_i x_i`, a scalar output.
//! * `AttentionHead`: a single attention head with diagonal weights,
//!   `smax(X diag(c_KQ) Xᵀ) X diag(c_VO)`, with `c = [c_KQ, c_VO]`. The output
//!   is flattened row-major over (token, feature). There is no `1/√d` scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearDiagonal,
    AttentionHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Sequence length. Always 1 for the linear model.
    pub n: usize,
    /// Token dimension.
    pub d: usize,
}

impl ModelSpec {
    pub fn linear(d: usize) -> Result<Self> {
        Self::new(ModelKind::LinearDiagonal, 1, d)
    }

    pub fn attention(n: usize, d: usize) -> Result<Self> {
        Self::new(ModelKind::AttentionHead, n, d)
    }

    pub fn new(kind: ModelKind, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!("model needs n >= 1 and d >= 1, got n={n}, d={d}")));
        }
        if kind == ModelKind::LinearDiagonal && n != 1 {
            return Err(Error::invalid("linear-diagonal model takes a single token (n = 1)"));
        }
        Ok(Self { kind, n, d })
    }

    /// Number of product parameters.
    pub fn p(&self) -> usize {
        match self.kind {
            ModelKind::LinearDiagonal => self.d,
            ModelKind::AttentionHead => 2 * self.d,
        }
    }

    pub fn d_out(&self) -> usize {
        match self.kind {
            ModelKind::LinearDiagonal => 1,
            ModelKind::AttentionHead => self.n * self.d,
        }
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn check(&self, c: &ProductParams, x: &TokenBatch) -> Result<()> {
        if c.len() != self.p() {
            return Err(Error::invalid(format!(
                "product params have length {}, model expects {}",
                c.len(),
                self.p()
            )));
        }
        if x.shape() != self.input_shape() {
            return Err(Error::invalid(format!(
                "input has shape {:?}, model expects {:?}",
                x.shape(),
                self.input_shape()
            )));
        }
        Ok(())
    }
}

/// The product vector `c = u ⊙ v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProductParams(pub Vec<f64>);

impl ProductParams {
    pub fn zeros(p: usize) -> Self {
        Self(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Splits attention-head parameters into `(c_KQ, c_VO)`.
    pub fn split_head(&self) -> (&[f64], &[f64]) {
        self.0.split_at(self.0.len() / 2)
    }
}

/// One input sample: an `n × d` token matrix (a `1 × d` row for the linear model).
pub type TokenBatch = Matrix;

pub fn softmax_rowwise(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::invalid("softmax input has non-finite entries"));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Cached intermediates of one attention-head evaluation.
struct HeadPass {
    /// Row-stochastic attention matrix, `n × n`.
    attn: Matrix,
    /// `attn · X`, `n × d`.
    mixed: Matrix,
}

fn head_pass(c_kq: &[f64], x: &Matrix) -> HeadPass {
    let (n, d) = x.shape();
    let mut scores = Matrix::zeros(n, n);
    for r in 0..n {
        let xr = x.row(r);
        for s in 0..=r {
            let xs = x.row(s);
            let mut acc = 0.0;
            for k in 0..d {
                acc += xr[k] * c_kq[k] * xs[k];
            }
            scores[(r, s)] = acc;
            scores[(s, r)] = acc;
        }
    }
    for r in 0..n {
        softmax_in_place(scores.row_mut(r));
    }
    let attn = scores;
    let mixed = attn.matmul(x).expect("attention is n x n");
    HeadPass { attn, mixed }
}

pub fn forward(spec: &ModelSpec, c: &ProductParams, x: &TokenBatch) -> Result<Vec<f64>> {
    spec.check(c, x)?;
    let out = match spec.kind {
        ModelKind::LinearDiagonal => vec![crate::linalg::dot(c.as_slice(), x.row(0))],
        ModelKind::AttentionHead => {
            let (c_kq, c_vo) = c.split_head();
            let pass = head_pass(c_kq, x);
            let mut out = pass.mixed.into_vec();
            for row in out.chunks_mut(spec.d) {
                for (o, b) in row.iter_mut().zip(c_vo) {
                    *o *= b;
                }
            }
            out
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("model output is not finite".into()));
    }
    Ok(out)
}

/// Exact Jacobian `∂h/∂c`, shape `d_out × p`.
///
/// For the head, with `A = smax(X diag(a) Xᵀ)`, `M = A X` and `b = c_VO`:
/// `∂Y[r,j]/∂a_k = b_j X[r,k] (Σ_s A[r,s] X[s,k] X[s,j] − M[r,k] M[r,j])` and
/// `∂Y[r,j]/∂b_k = δ_jk M[r,j]`.
pub fn jacobian(spec: &ModelSpec, c: &ProductParams, x: &TokenBatch) -> Result<Matrix> {
    spec.check(c, x)?;
    let jac = match spec.kind {
        ModelKind::LinearDiagonal => Matrix::from_vec(1, spec.d, x.row(0).to_vec())?,
        ModelKind::AttentionHead => {
            let (n, d) = (spec.n, spec.d);
            let (c_kq, c_vo) = c.split_head();
            let pass = head_pass(c_kq, x);
            let mut jac = Matrix::zeros(n * d, 2 * d);
            for r in 0..n {
                let attn_r = pass.attn.row(r);
                let m_r = pass.mixed.row(r);
                // Attention-weighted second moment of tokens seen from row r.
                let mut second = Matrix::zeros(d, d);
                for (s, &w) in attn_r.iter().enumerate() {
                    let xs = x.row(s);
                    for k in 0..d {
                        let wk = w * xs[k];
                        for (j, &xsj) in xs.iter().enumerate() {
                            second[(k, j)] += wk * xsj;
                        }
                    }
                }
                let xr = x.row(r);
                for j in 0..d {
                    let out_row = r * d + j;
                    for k in 0..d {
                        let cov = second[(k, j)] - m_r[k] * m_r[j];
                        jac[(out_row, k)] = c_vo[j] * xr[k] * cov;
                    }
                    jac[(out_row, d + j)] = m_r[j];
                }
            }
            jac
        }
    };
    if !jac.is_finite() {
        return Err(Error::NumericOverflow("Jacobian is not finite".into()));
    }
    Ok(jac)
}

/// Model output together with the pullback `Jᵀ r` for a cotangent `r` built
/// from that output.
///
/// Computes the same quantity as `jacobian(..)ᵀ · r` without forming the
/// Jacobian; for the head this is O(n²d) instead of O(n d²).
pub(crate) fn forward_pullback(
    spec: &ModelSpec,
    c: &ProductParams,
    x: &TokenBatch,
    cotangent: impl FnOnce(&[f64]) -> Vec<f64>,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    spec.check(c, x)?;
    match spec.kind {
        ModelKind::LinearDiagonal => {
            let out = vec![crate::linalg::dot(c.as_slice(), x.row(0))];
            let r = cotangent(&out);
            for (g, &xi) in grad.iter_mut().zip(x.row(0)) {
                *g += r[0] * xi;
            }
            Ok(out)
        }
        ModelKind::AttentionHead => {
            let (n, d) = (spec.n, spec.d);
            let (c_kq, c_vo) = c.split_head();
            let pass = head_pass(c_kq, x);
            let mut out = pass.mixed.as_slice().to_vec();
            for row in out.chunks_mut(d) {
                for (o, b) in row.iter_mut().zip(c_vo) {
                    *o *= b;
                }
            }
            let r = cotangent(&out);
            let (grad_kq, grad_vo) = grad.split_at_mut(d);
            for row in 0..n {
                let r_row = &r[row * d..(row + 1) * d];
                let m_row = pass.mixed.row(row);
                for k in 0..d {
                    grad_vo[k] += r_row[k] * m_row[k];
                }
            }
            if c_vo.iter().all(|&b| b == 0.0) {
                return Ok(out);
            }
            // z[r,s] = Σ_j R[r,j] b_j X[s,j]; then back through the row softmax.
            let mut rb = vec![0.0; d];
            let mut z = vec![0.0; n];
            for row in 0..n {
                let r_row = &r[row * d..(row + 1) * d];
                for j in 0..d {
                    rb[j] = r_row[j] * c_vo[j];
                }
                for (s, zs) in z.iter_mut().enumerate() {
                    *zs = crate::linalg::dot(&rb, x.row(s));
                }
                let attn_r = pass.attn.row(row);
                let mean_z = crate::linalg::dot(attn_r, &z);
                let xr = x.row(row);
                for s in 0..n {
                    let gs = attn_r[s] * (z[s] - mean_z);
                    if gs == 0.0 {
                        continue;
                    }
                    let xs = x.row(s);
                    for k in 0..d {
                        grad_kq[k] += gs * xr[k] * xs[k];
                    }
                }
            }
            Ok(out)
        }
    }
}
