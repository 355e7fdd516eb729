//! Square loss, synthetic student-teacher data, and the gradient signal
//! `g(θ) = −E[Dℓ(y, h(x; u⊙v))ᵀ Dh(x; u⊙v)ᵀ]`.
//!
//! Expectations are empirical means over a fixed dataset. Per-sample work is
//! split into fixed-size chunks that may run on any number of threads; the
//! chunk partial sums are always reduced in chunk order, so results do not
//! depend on the thread count.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::model::{forward, forward_pullback, ModelKind, ModelSpec, ProductParams, TokenBatch};

const CHUNK: usize = 64;

/// Square loss `½‖y − ζ‖²`, its derivative `(ζ − y)ᵀ` in ζ and the (identity)
/// second derivative, returned as its diagonal.
pub fn squared_error(y: &[f64], zeta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if y.len() != zeta.len() {
        return Err(Error::invalid(format!(
            "label length {} != prediction length {}",
            y.len(),
            zeta.len()
        )));
    }
    let d: Vec<f64> = zeta.iter().zip(y).map(|(z, y)| z - y).collect();
    let loss = 0.5 * d.iter().map(|e| e * e).sum::<f64>();
    Ok((loss, d, vec![1.0; y.len()]))
}

/// Paired diagonal weights `θ = (u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Theta {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != v.len() {
            return Err(Error::invalid(format!(
                "theta halves differ in length: {} vs {}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::invalid("theta has non-finite entries"));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            u: vec![0.0; p],
            v: vec![0.0; p],
        }
    }

    /// i.i.d. standard Gaussian entries scaled by `scale`.
    pub fn gaussian(p: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_| scale * rng.sample::<f64, _>(StandardNormal);
        let u = (0..p).map(&mut draw).collect();
        let v = (0..p).map(&mut draw).collect();
        Self { u, v }
    }

    pub fn p(&self) -> usize {
        self.u.len()
    }

    pub fn products(&self) -> ProductParams {
        ProductParams(self.u.iter().zip(&self.v).map(|(a, b)| a * b).collect())
    }

    pub fn scaled(&self, s: f64) -> Theta {
        Theta {
            u: self.u.iter().map(|x| x * s).collect(),
            v: self.v.iter().map(|x| x * s).collect(),
        }
    }

    /// `u_i² − v_i²` per coordinate.
    pub fn imbalance(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(a, b)| a * a - b * b).collect()
    }

    /// Flattened `[u, v]`.
    pub fn flat(&self) -> Vec<f64> {
        self.u.iter().chain(&self.v).copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Theta {
        let (u, v) = flat.split_at(flat.len() / 2);
        Theta {
            u: u.to_vec(),
            v: v.to_vec(),
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.flat())
    }

    /// `∇_θ L = (−v ⊙ g, −u ⊙ g)`, flattened.
    pub fn loss_gradient(&self, g: &GradientSignal) -> Vec<f64> {
        let gu = self.v.iter().zip(&g.0).map(|(v, g)| -v * g);
        let gv = self.u.iter().zip(&g.0).map(|(u, g)| -u * g);
        gu.chain(gv).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradientSignal(pub Vec<f64>);

impl GradientSignal {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: TokenBatch,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub samples: Vec<Sample>,
    /// Largest input or label norm in the dataset.
    pub bound: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn new(spec: ModelSpec, samples: Vec<Sample>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        let mut bound = 0.0f64;
        for (i, s) in samples.iter().enumerate() {
            if s.x.shape() != spec.input_shape() || s.y.len() != spec.d_out() {
                return Err(Error::invalid(format!("sample {i} does not match the model shape")));
            }
            if !s.x.is_finite() || s.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {i} has non-finite entries")));
            }
            bound = bound.max(s.x.frobenius_norm()).max(norm(&s.y));
        }
        Ok(Self {
            spec,
            samples,
            bound,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy of this dataset with labels replaced by the model output at `c`.
    pub fn relabel(&self, c: &ProductParams) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    x: s.x.clone(),
                    y: forward(&self.spec, c, &s.x)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.spec, samples, self.seed)
    }
}

/// Options for synthetic student-teacher data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
    pub num_samples: usize,
    pub seed: u64,
    /// Seed of the teacher weights; defaults to `seed`.
    pub teacher_seed: Option<u64>,
    /// Standard deviation of the teacher weight entries.
    pub teacher_scale: f64,
    /// Standard deviation of additive label noise (0 = noiseless).
    pub label_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::AttentionHead,
            n: 10,
            d: 50,
            num_samples: 1000,
            seed: 0,
            teacher_seed: None,
            teacher_scale: 1.0,
            label_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    /// `u = [w_K, w_V]`, `v = [w_Q, w_O]` for the head; plain `(u, v)` for the linear model.
    pub weights: Theta,
    pub params: ProductParams,
}

/// Student-teacher dataset for an attention head with i.i.d. standard
/// Gaussian tokens and a random diagonal teacher head.
pub fn make_student_teacher(seed: u64, n: usize, d: usize, num_samples: usize) -> Result<(Dataset, Teacher)> {
    generate(&DataConfig {
        n,
        d,
        num_samples,
        seed,
        ..DataConfig::default()
    })
}

pub fn generate(cfg: &DataConfig) -> Result<(Dataset, Teacher)> {
    if cfg.num_samples == 0 {
        return Err(Error::invalid("num_samples must be >= 1"));
    }
    if !(cfg.teacher_scale.is_finite() && cfg.label_noise >= 0.0 && cfg.label_noise.is_finite()) {
        return Err(Error::invalid("teacher_scale and label_noise must be finite, noise >= 0"));
    }
    let n = match cfg.kind {
        ModelKind::LinearDiagonal => 1,
        ModelKind::AttentionHead => cfg.n,
    };
    let spec = ModelSpec::new(cfg.kind, n, cfg.d)?;

    let mut teacher_rng = ChaCha8Rng::seed_from_u64(cfg.teacher_seed.unwrap_or(cfg.seed));
    teacher_rng.set_stream(1);
    let p = spec.p();
    let mut draw = |_| cfg.teacher_scale * teacher_rng.sample::<f64, _>(StandardNormal);
    let weights = Theta {
        u: (0..p).map(&mut draw).collect(),
        v: (0..p).map(&mut draw).collect(),
    };
    let params = weights.products();

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let x = Matrix::from_fn(n, cfg.d, |_, _| data_rng.sample(StandardNormal));
        let mut y = forward(&spec, &params, &x)?;
        if cfg.label_noise > 0.0 {
            for v in &mut y {
                *v += cfg.label_noise * noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
        samples.push(Sample { x, y });
    }
    let dataset = Dataset::new(spec, samples, cfg.seed)?;
    Ok((dataset, Teacher { weights, params }))
}

/// Loss and gradient signal evaluated together.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub g: GradientSignal,
}

fn check_theta(spec: &ModelSpec, theta: &Theta) -> Result<()> {
    if theta.u.len() != spec.p() || theta.v.len() != spec.p() {
        return Err(Error::invalid(format!(
            "theta has p = {}, model expects {}",
            theta.p(),
            spec.p()
        )));
    }
    Ok(())
}

/// Empirical loss and `g` at product parameters `c`, over a subset of samples.
pub(crate) fn evaluate_params(spec: &ModelSpec, samples: &[&Sample], c: &ProductParams) -> Result<Evaluation> {
    let p = spec.p();
    let partials: Vec<Result<(f64, Vec<f64>)>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut g = vec![0.0; p];
            for s in chunk {
                let mut sample_loss = 0.0;
                forward_pullback(
                    spec,
                    c,
                    &s.x,
                    |out| {
                        let resid: Vec<f64> = s.y.iter().zip(out).map(|(y, z)| y - z).collect();
                        sample_loss = 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
                        resid
                    },
                    &mut g,
                )?;
                loss += sample_loss;
            }
            Ok((loss, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut g = vec![0.0; p];
    for part in partials {
        let (l, gp) = part?;
        loss += l;
        for (a, b) in g.iter_mut().zip(gp) {
            *a += b;
        }
    }
    let scale = 1.0 / samples.len() as f64;
    loss *= scale;
    for v in &mut g {
        *v *= scale;
    }
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow(format!("non-finite loss or gradient signal (loss = {loss})")));
    }
    Ok(Evaluation {
        loss,
        g: GradientSignal(g),
    })
}

pub fn evaluate(spec: &ModelSpec, dataset: &Dataset, theta: &Theta) -> Result<Evaluation> {
    check_theta(spec, theta)?;
    let refs: Vec<&Sample> = dataset.samples.iter().collect();
    evaluate_params(spec, &refs, &theta.products())
}

pub fn gradient_signal(spec: &ModelSpec, dataset: &Dataset, theta: &Theta) -> Result<GradientSignal> {
    Ok(evaluate(spec, dataset, theta)?.g)
}

pub fn loss(spec: &ModelSpec, dataset: &Dataset, theta: &Theta) -> Result<f64> {
    check_theta(spec, theta)?;
    loss_at(spec, dataset, &theta.products())
}

pub fn loss_at(spec: &ModelSpec, dataset: &Dataset, c: &ProductParams) -> Result<f64> {
    let partials: Vec<Result<f64>> = dataset
        .samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            for s in chunk {
                let out = forward(spec, c, &s.x)?;
                acc += 0.5 * s.y.iter().zip(&out).map(|(y, z)| (y - z) * (y - z)).sum::<f64>();
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    let l = total / dataset.len() as f64;
    if !l.is_finite() {
        return Err(Error::NumericOverflow("loss is not finite".into()));
    }
    Ok(l)
}

/// JSON sidecar for the raw dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub d: usize,
    pub num_samples: usize,
    pub seed: u64,
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
}

fn default_kind() -> ModelKind {
    ModelKind::AttentionHead
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            n: self.spec.n,
            d: self.spec.d,
            num_samples: self.len(),
            seed: self.seed,
            kind: self.spec.kind,
        }
    }

    /// Raw little-endian f64 payload (per sample: `x` row-major, then `y`)
    /// plus `<path>.json` header.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.len() * (self.spec.n * self.spec.d + self.spec.d_out()) * 8);
        for s in &self.samples {
            for v in s.x.as_slice().iter().chain(&s.y) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let header_path = sidecar_path(path);
        let header = serde_json::to_string_pretty(&self.header()).expect("header serializes");
        fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))
    }

    pub fn read_raw(path: &Path) -> Result<Dataset> {
        let header_path = sidecar_path(path);
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: DatasetHeader =
            serde_json::from_str(&text).map_err(|e| Error::format(&header_path, e.to_string()))?;
        let spec = ModelSpec::new(header.kind, header.n, header.d)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let per = spec.n * spec.d + spec.d_out();
        if bytes.len() != header.num_samples * per * 8 {
            return Err(Error::format(path, format!("expected {} bytes, found {}", header.num_samples * per * 8, bytes.len())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        let samples = values
            .chunks_exact(per)
            .map(|chunk| {
                let (x, y) = chunk.split_at(spec.n * spec.d);
                Ok(Sample {
                    x: Matrix::from_vec(spec.n, spec.d, x.to_vec())?,
                    y: y.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(spec, samples, header.seed)
    }

    /// CSV with one row group per sample: `n` rows `sample,x,row,values...`
    /// followed by the label rows `sample,y,row,values...` (label reshaped to
    /// `n × d` for the head, a single value for the linear model).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let label_cols = match self.spec.kind {
            ModelKind::LinearDiagonal => 1,
            ModelKind::AttentionHead => self.spec.d,
        };
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "sample,role,row,values")?;
            for (i, s) in self.samples.iter().enumerate() {
                for r in 0..s.x.rows() {
                    write_csv_row(&mut w, i, "x", r, s.x.row(r))?;
                }
                for (r, chunk) in s.y.chunks(label_cols).enumerate() {
                    write_csv_row(&mut w, i, "y", r, chunk)?;
                }
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, spec: ModelSpec, seed: u64) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut samples: Vec<Sample> = Vec::new();
        let mut x_rows: Vec<f64> = Vec::new();
        let mut y_vals: Vec<f64> = Vec::new();
        let mut current: Option<usize> = None;
        let flush = |x_rows: &mut Vec<f64>, y_vals: &mut Vec<f64>, samples: &mut Vec<Sample>| -> Result<()> {
            let x = Matrix::from_vec(spec.n, spec.d, std::mem::take(x_rows))
                .map_err(|e| Error::format(path, e.to_string()))?;
            samples.push(Sample {
                x,
                y: std::mem::take(y_vals),
            });
            Ok(())
        };
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let bad = || Error::format(path, format!("malformed row at line {}", lineno + 1));
            let idx: usize = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(bad)?;
            let role = fields.next().ok_or_else(bad)?.trim().to_string();
            let _row = fields.next().ok_or_else(bad)?;
            let values = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            if current != Some(idx) {
                if current.is_some() {
                    flush(&mut x_rows, &mut y_vals, &mut samples)?;
                }
                current = Some(idx);
            }
            match role.as_str() {
                "x" => x_rows.extend(values),
                "y" => y_vals.extend(values),
                _ => return Err(bad()),
            }
        }
        if current.is_some() {
            flush(&mut x_rows, &mut y_vals, &mut samples)?;
        }
        Dataset::new(spec, samples, seed).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn write_csv_row(w: &mut impl Write, sample: usize, role: &str, row: usize, values: &[f64]) -> std::io::Result<()> {
    write!(w, "{sample},{role},{row}")?;
    for v in values {
        write!(w, ",{v}")?;
    }
    writeln!(w)
}

/// `data.bin` → `data.bin.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
