//! Gradient flow `dθ/dt = −∇L(θ)` from `θ(0) = α θ₀`, optionally in rescaled
//! time (right-hand side multiplied by `log(1/α)`).
//!
//! Two state representations are available:
//!
//! * `Coordinates::Log` (default) integrates `m = log_α(u + v)`, for which the
//!   rescaled flow is simply `dm/dt = −g(θ(m))`. The conserved `q = u² − v²`
//!   is carried alongside and θ is rebuilt from `(m, q)` at every evaluation.
//! * `Coordinates::Direct` integrates `(u, v)` with `du/dt = v ⊙ g`,
//!   `dv/dt = u ⊙ g`. It is kept as an independent cross-check.

mod export;
pub mod rk;
mod sgd;

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

pub use export::{trajectory_file_stem, write_trajectory_csv, write_trajectory_jsonl};
pub use sgd::{train_sgd, SgdConfig};
pub(crate) use sgd::run_sgd_segment;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::objective::{evaluate, Dataset, GradientSignal, Theta};
use rk::{Dopri5, OdeSystem};

/// Smallest initialization scale accepted; keeps `α²` and `α³` normal.
pub const MIN_ALPHA: f64 = 1e-100;

/// Per-coordinate transformations applied by [`canonicalize_init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignRecord {
    /// `u_i` and `v_i` were exchanged.
    pub swapped: Vec<bool>,
    /// Both entries were negated (after any swap).
    pub negated: Vec<bool>,
}

impl SignRecord {
    /// Maps a canonical-frame θ back to the original frame.
    pub fn restore(&self, theta: &Theta) -> Theta {
        let mut out = theta.clone();
        for i in 0..out.p() {
            if self.negated[i] {
                out.u[i] = -out.u[i];
                out.v[i] = -out.v[i];
            }
            if self.swapped[i] {
                std::mem::swap(&mut out.u[i], &mut out.v[i]);
            }
        }
        out
    }
}

/// Brings an initialization into the frame `u > |v|` entrywise without
/// changing `u ⊙ v`. Swapping `u_i ↔ v_i` and negating both are symmetries
/// of any model that depends only on the products.
pub fn canonicalize_init(theta0: &Theta) -> Result<(Theta, SignRecord)> {
    let p = theta0.p();
    let mut out = theta0.clone();
    let mut record = SignRecord {
        swapped: vec![false; p],
        negated: vec![false; p],
    };
    for i in 0..p {
        let (au, av) = (out.u[i].abs(), out.v[i].abs());
        if (au - av).abs() <= 1e-14 * au.max(av) {
            return Err(Error::DegenerateInitialization { index: i, magnitude: au });
        }
        if av > au {
            std::mem::swap(&mut out.u[i], &mut out.v[i]);
            record.swapped[i] = true;
        }
        if out.u[i] < 0.0 {
            out.u[i] = -out.u[i];
            out.v[i] = -out.v[i];
            record.negated[i] = true;
        }
    }
    Ok((out, record))
}

pub fn is_canonical(theta: &Theta) -> bool {
    theta.u.iter().zip(&theta.v).all(|(u, v)| *u > v.abs())
}

/// `w = u + v` tracked as `m = log_α(w)` together with the conserved
/// `q = u² − v²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogWeightState {
    pub m: Vec<f64>,
    pub q: Vec<f64>,
}

impl LogWeightState {
    pub fn from_theta(theta: &Theta, alpha: f64) -> Result<Self> {
        let ln_a = alpha.ln();
        let mut m = Vec::with_capacity(theta.p());
        for (i, (u, v)) in theta.u.iter().zip(&theta.v).enumerate() {
            let w = u + v;
            if !(w > 0.0) {
                return Err(Error::invalid(format!("w = u + v must be positive (coordinate {i})")));
            }
            m.push(w.ln() / ln_a);
        }
        Ok(Self { m, q: theta.imbalance() })
    }

    /// Rebuilds `(u, v) = (½(w + q/w), ½(w − q/w))` with `w = α^m`.
    pub fn reconstruct(&self, alpha: f64) -> Result<Theta> {
        reconstruct(&self.m, &self.q, alpha)
    }
}

/// Lower bound on `w_i`: `α q_i`, i.e. `|u_i − v_i| ≤ 1/α`. Equals `α³` when
/// `q_i = α²`.
fn w_floor(qi: f64, alpha: f64) -> f64 {
    (alpha * qi.abs()).max(f64::MIN_POSITIVE)
}

fn reconstruct(m: &[f64], q: &[f64], alpha: f64) -> Result<Theta> {
    let ln_a = alpha.ln();
    let mut u = Vec::with_capacity(m.len());
    let mut v = Vec::with_capacity(m.len());
    for (i, (&mi, &qi)) in m.iter().zip(q).enumerate() {
        let w = (mi * ln_a).exp();
        if !w.is_finite() {
            return Err(Error::NumericOverflow(format!("w_{i} = α^{mi} overflowed")));
        }
        if w < w_floor(qi, alpha) {
            return Err(Error::Numeric(format!("w_{i} = {w:e} fell below the floor α·q_i")));
        }
        let r = qi / w;
        u.push(0.5 * (w + r));
        v.push(0.5 * (w - r));
    }
    Ok(Theta { u, v })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coordinates {
    #[default]
    Log,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub alpha: f64,
    /// Multiply the right-hand side by `log(1/α)`.
    pub rescaled: bool,
    pub rel_tol: f64,
    /// Multiplier on the absolute tolerance: `1e-9` on `m` in log
    /// coordinates, `rel_tol · α²` on `(u, v)` in direct coordinates.
    pub abs_tol_scale: f64,
    pub t_end: f64,
    pub snapshot_grid: Vec<f64>,
    pub coordinates: Coordinates,
    /// Replaces `log(1/α)` in the rescaled right-hand side.
    pub rescale_override: Option<f64>,
    pub max_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            rescaled: true,
            rel_tol: 1e-9,
            abs_tol_scale: 1.0,
            t_end: 1.0,
            snapshot_grid: Vec::new(),
            coordinates: Coordinates::Log,
            rescale_override: None,
            max_steps: 5_000_000,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.alpha < MIN_ALPHA {
            return Err(Error::Config(format!("alpha must be >= {MIN_ALPHA:e}")));
        }
        if !(self.rel_tol > 0.0 && self.abs_tol_scale > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config("t_end must be positive and finite".into()));
        }
        if self.snapshot_grid.windows(2).any(|w| w[1] <= w[0])
            || self.snapshot_grid.iter().any(|&t| !(t > 0.0 && t <= self.t_end))
        {
            return Err(Error::Config("snapshot_grid must be strictly increasing within (0, t_end]".into()));
        }
        if let Some(s) = self.rescale_override {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("rescale_override must be positive".into()));
            }
        }
        Ok(())
    }

    /// `log(1/α)`.
    pub fn log_inv_alpha(&self) -> f64 {
        -self.alpha.ln()
    }

    /// Factor multiplying `−∇L` in the integrated equation.
    pub fn time_factor(&self) -> f64 {
        if self.rescaled {
            self.rescale_override.unwrap_or_else(|| self.log_inv_alpha())
        } else {
            1.0
        }
    }

    /// Stop times: the snapshot grid plus `t_end`.
    fn stops(&self) -> Vec<f64> {
        let mut stops = self.snapshot_grid.clone();
        if stops.last().is_none_or(|&t| t < self.t_end) {
            stops.push(self.t_end);
        }
        stops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    /// SGD epoch, when the trajectory comes from SGD.
    pub epoch: Option<usize>,
    pub theta: Theta,
    /// `log_α(u + v)`; NaN where `u + v ≤ 0`.
    pub log_w: Vec<f64>,
    /// `u² − v²` as represented by the state (the carried `q` in log coordinates).
    pub imbalance: Vec<f64>,
    pub loss: f64,
    pub g: GradientSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Origin {
    Flow(FlowConfig),
    Sgd(SgdConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub alpha: f64,
    /// Conserved `u² − v²` at t = 0.
    pub q: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub origin: Origin,
    /// Largest loss increase between consecutive accepted steps.
    pub max_loss_increase: f64,
    pub steps: usize,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.loss).collect()
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectories are never empty")
    }

    pub fn snapshot_at_epoch(&self, epoch: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.epoch == Some(epoch))
    }
}

pub(crate) fn log_w_of(theta: &Theta, alpha: f64) -> Vec<f64> {
    let ln_a = alpha.ln();
    theta
        .u
        .iter()
        .zip(&theta.v)
        .map(|(u, v)| {
            let w = u + v;
            if w > 0.0 {
                w.ln() / ln_a
            } else {
                f64::NAN
            }
        })
        .collect()
}

struct LogSystem<'a> {
    spec: &'a ModelSpec,
    data: &'a Dataset,
    q: &'a [f64],
    alpha: f64,
    /// `time_factor / log(1/α)`.
    factor: f64,
}

impl OdeSystem for LogSystem<'_> {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn rhs(&mut self, _t: f64, m: &[f64], dm: &mut [f64]) -> Result<f64> {
        let theta = reconstruct(m, self.q, self.alpha)?;
        let ev = evaluate(self.spec, self.data, &theta)?;
        for (d, g) in dm.iter_mut().zip(ev.g.as_slice()) {
            *d = -self.factor * g;
        }
        Ok(ev.loss)
    }
}

/// Direct `(u, v)` flow, optionally frozen outside `mask`.
pub(crate) struct DirectSystem<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub factor: f64,
    pub mask: Option<&'a [bool]>,
}

impl OdeSystem for DirectSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.spec.p()
    }

    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<f64> {
        let p = self.spec.p();
        let theta = Theta::from_flat(y);
        let ev = evaluate(self.spec, self.data, &theta)?;
        let g = ev.g.as_slice();
        for i in 0..p {
            let active = self.mask.is_none_or(|m| m[i]);
            if active {
                dy[i] = self.factor * theta.v[i] * g[i];
                dy[p + i] = self.factor * theta.u[i] * g[i];
            } else {
                dy[i] = 0.0;
                dy[p + i] = 0.0;
            }
        }
        Ok(ev.loss)
    }
}

/// Integrates the gradient flow from the (already scaled) initial point
/// `theta0`, which must satisfy `u > |v|` entrywise (see [`canonicalize_init`]).
pub fn integrate_flow(spec: &ModelSpec, dataset: &Dataset, theta0: &Theta, config: &FlowConfig) -> Result<Trajectory> {
    config.validate()?;
    if theta0.p() != spec.p() {
        return Err(Error::invalid("theta0 does not match the model"));
    }
    if !is_canonical(theta0) {
        return Err(Error::invalid(
            "theta0 must be canonical (u > |v| entrywise); call canonicalize_init first",
        ));
    }
    let alpha = config.alpha;
    let q = theta0.imbalance();
    let stops = config.stops();
    let factor = config.time_factor();
    let p = spec.p();

    let mut snapshots = Vec::with_capacity(stops.len() + 1);
    let mut last_loss = f64::INFINITY;
    let mut max_increase = 0.0f64;

    let stats = match config.coordinates {
        Coordinates::Log => {
            let state = LogWeightState::from_theta(theta0, alpha)?;
            let mut sys = LogSystem {
                spec,
                data: dataset,
                q: &q,
                alpha,
                factor: factor / config.log_inv_alpha(),
            };
            let mut solver = Dopri5::new(config.rel_tol, 1e-9 * config.abs_tol_scale);
            solver.max_steps = config.max_steps;
            solver.integrate(&mut sys, 0.0, &state.m, config.t_end, &stops, |ev| {
                if ev.aux.is_finite() {
                    max_increase = max_increase.max(ev.aux - last_loss);
                    last_loss = ev.aux;
                }
                if ev.t == 0.0 || ev.stop_index.is_some() {
                    let theta = reconstruct(ev.y, &q, alpha)?;
                    let g = GradientSignal(ev.dy.iter().map(|d| -d * config.log_inv_alpha() / factor).collect());
                    snapshots.push(Snapshot {
                        t: ev.t,
                        epoch: None,
                        log_w: ev.y.to_vec(),
                        imbalance: q.clone(),
                        theta,
                        loss: ev.aux,
                        g,
                    });
                }
                Ok(ControlFlow::Continue(()))
            })?
        }
        Coordinates::Direct => {
            let mut sys = DirectSystem {
                spec,
                data: dataset,
                factor,
                mask: None,
            };
            let atol = config.abs_tol_scale * config.rel_tol * alpha * alpha;
            let mut solver = Dopri5::new(config.rel_tol, atol);
            solver.max_steps = config.max_steps;
            solver.integrate(&mut sys, 0.0, &theta0.flat(), config.t_end, &stops, |ev| {
                if ev.aux.is_finite() {
                    max_increase = max_increase.max(ev.aux - last_loss);
                    last_loss = ev.aux;
                }
                if ev.t == 0.0 || ev.stop_index.is_some() {
                    let theta = Theta::from_flat(ev.y);
                    let g = GradientSignal(
                        (0..p)
                            .map(|i| {
                                // recover g from du/dt = f v g when v ≠ 0, else from dv/dt = f u g
                                if theta.v[i].abs() >= theta.u[i].abs() {
                                    ev.dy[i] / (factor * theta.v[i])
                                } else {
                                    ev.dy[p + i] / (factor * theta.u[i])
                                }
                            })
                            .collect(),
                    );
                    snapshots.push(Snapshot {
                        t: ev.t,
                        epoch: None,
                        log_w: log_w_of(&theta, alpha),
                        imbalance: theta.imbalance(),
                        theta,
                        loss: ev.aux,
                        g,
                    });
                }
                Ok(ControlFlow::Continue(()))
            })?
        }
    };

    Ok(Trajectory {
        alpha,
        q,
        snapshots,
        origin: Origin::Flow(config.clone()),
        max_loss_increase: max_increase,
        steps: stats.accepted,
    })
}

/// Outcome of [`flow_to_stationarity`].
#[derive(Debug, Clone)]
pub struct StationaryRun {
    pub theta: Theta,
    pub grad_norm: f64,
    pub time: f64,
    pub converged: bool,
}

/// Unrescaled gradient flow in direct coordinates, restricted to `mask`,
/// stopped at the first `t ≥ min_time` with `‖∇L‖ ≤ grad_tol`, or at `max_time`.
#[allow(clippy::too_many_arguments)]
pub fn flow_to_stationarity(
    spec: &ModelSpec,
    dataset: &Dataset,
    start: &Theta,
    mask: &[bool],
    rel_tol: f64,
    grad_tol: f64,
    min_time: f64,
    max_time: f64,
) -> Result<StationaryRun> {
    let mut sys = DirectSystem {
        spec,
        data: dataset,
        factor: 1.0,
        mask: Some(mask),
    };
    let mut solver = Dopri5::new(rel_tol, rel_tol * 1e-6);
    solver.max_steps = 10_000_000;
    let mut best = StationaryRun {
        theta: start.clone(),
        grad_norm: f64::INFINITY,
        time: 0.0,
        converged: false,
    };
    solver.integrate(&mut sys, 0.0, &start.flat(), max_time, &[], |ev| {
        let gn = crate::linalg::norm(ev.dy);
        best = StationaryRun {
            theta: Theta::from_flat(ev.y),
            grad_norm: gn,
            time: ev.t,
            converged: gn <= grad_tol && ev.t >= min_time,
        };
        Ok(if best.converged {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    })?;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_examples() {
        let (t, rec) = canonicalize_init(&Theta::new(vec![-2.0], vec![1.0]).unwrap()).unwrap();
        assert_eq!((t.u[0], t.v[0]), (2.0, -1.0));
        assert_eq!(t.products().0, vec![-2.0]);
        assert_eq!(rec.restore(&t), Theta::new(vec![-2.0], vec![1.0]).unwrap());

        let (t, rec) = canonicalize_init(&Theta::new(vec![1.0], vec![2.0]).unwrap()).unwrap();
        assert_eq!((t.u[0], t.v[0]), (2.0, 1.0));
        assert!(rec.swapped[0] && !rec.negated[0]);

        let err = canonicalize_init(&Theta::new(vec![1.0], vec![1.0]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegenerateInitialization { index: 0, .. }));
        assert!(canonicalize_init(&Theta::new(vec![0.5, 3.0], vec![0.1, -3.0]).unwrap()).is_err());
    }

    #[test]
    fn reconstruction_recovers_theta() {
        let theta = Theta::new(vec![1e-3, 2.0, 0.7], vec![-4e-4, 1.5, -0.69]).unwrap();
        let alpha = 1e-4;
        let state = LogWeightState::from_theta(&theta, alpha).unwrap();
        let back = state.reconstruct(alpha).unwrap();
        for i in 0..3 {
            assert!((back.u[i] - theta.u[i]).abs() <= 1e-14 * theta.u[i].abs());
            assert!((back.v[i] - theta.v[i]).abs() <= 1e-12 * theta.u[i].abs());
        }
    }

    #[test]
    fn reconstruction_floor() {
        let state = LogWeightState {
            m: vec![3.5],
            q: vec![1e-4],
        };
        assert!(LogWeightState { m: vec![2.9], q: vec![1e-4] }.reconstruct(1e-2).is_ok());
        assert!(matches!(state.reconstruct(1e-2), Err(Error::Numeric(_))));
    }

    #[test]
    fn config_validation() {
        let bad = FlowConfig {
            alpha: 1.5,
            ..FlowConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = FlowConfig {
            alpha: 1e-120,
            ..FlowConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FlowConfig {
            snapshot_grid: vec![0.5, 0.2],
            ..FlowConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
