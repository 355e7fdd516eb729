//! Independent reference implementations used as test oracles. None of these
//! call into the code under test except for types.

#![allow(dead_code)]

use diagflow::linalg::Matrix;
use diagflow::model::{ModelKind, ModelSpec, ProductParams};
use diagflow::objective::{Dataset, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn gauss_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, gauss_vec(rows * cols, 1.0, rng)).unwrap()
}

/// Kahan-compensated sum.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Model output written out from the definition with plain loops.
pub fn naive_forward(spec: &ModelSpec, c: &[f64], x: &Matrix) -> Vec<f64> {
    match spec.kind {
        ModelKind::LinearDiagonal => vec![(0..spec.d).map(|i| c[i] * x[(0, i)]).sum()],
        ModelKind::AttentionHead => {
            let (n, d) = (spec.n, spec.d);
            let (a, b) = c.split_at(d);
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|s| (0..d).map(|k| x[(r, k)] * a[k] * x[(s, k)]).sum())
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..d {
                    let mixed: f64 = (0..n).map(|s| e[s] / z * x[(s, j)]).sum();
                    out[r * d + j] = mixed * b[j];
                }
            }
            out
        }
    }
}

/// Central finite-difference Jacobian of `naive_forward` in `c`.
pub fn fd_jacobian(spec: &ModelSpec, c: &[f64], x: &Matrix, h: f64) -> Matrix {
    let p = c.len();
    let rows = spec.d_out();
    let mut jac = Matrix::zeros(rows, p);
    for k in 0..p {
        let step = h * (1.0 + c[k].abs());
        let mut cp = c.to_vec();
        let mut cm = c.to_vec();
        cp[k] += step;
        cm[k] -= step;
        let fp = naive_forward(spec, &cp, x);
        let fm = naive_forward(spec, &cm, x);
        for r in 0..rows {
            jac[(r, k)] = (fp[r] - fm[r]) / (2.0 * step);
        }
    }
    jac
}

/// `(1/N) Σ ½‖y − h(x; c)‖²` with the naive forward pass and Kahan sums.
pub fn naive_loss(dataset: &Dataset, c: &[f64]) -> f64 {
    let per_sample = dataset.samples.iter().map(|s| {
        let out = naive_forward(&dataset.spec, c, &s.x);
        0.5 * kahan_sum(s.y.iter().zip(&out).map(|(y, z)| (y - z) * (y - z)))
    });
    kahan_sum(per_sample) / dataset.len() as f64
}

/// Classical RK4 with a fixed step.
pub fn rk4(mut f: impl FnMut(&[f64]) -> Vec<f64>, y0: &[f64], t_end: f64, steps: usize) -> Vec<f64> {
    let h = t_end / steps as f64;
    let mut y = y0.to_vec();
    let axpy = |y: &[f64], k: &[f64], s: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    for _ in 0..steps {
        let k1 = f(&y);
        let k2 = f(&axpy(&y, &k1, h / 2.0));
        let k3 = f(&axpy(&y, &k2, h / 2.0));
        let k4 = f(&axpy(&y, &k3, h));
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

/// Linear model with orthogonal one-hot inputs: sample `i` has `x = e_i` and
/// label `targets[i]`, so `L(c) = (1/d) Σ ½ (targets_i − c_i)²` and
/// `g(0) = targets / d`.
pub fn one_hot_linear(targets: &[f64]) -> Dataset {
    let d = targets.len();
    let spec = ModelSpec::linear(d).unwrap();
    let samples = (0..d)
        .map(|i| Sample {
            x: Matrix::from_fn(1, d, |_, j| if i == j { 1.0 } else { 0.0 }),
            y: vec![targets[i]],
        })
        .collect();
    Dataset::new(spec, samples, 0).unwrap()
}

pub fn products(c: &ProductParams) -> &[f64] {
    c.as_slice()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
