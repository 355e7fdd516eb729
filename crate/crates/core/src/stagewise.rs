//! The `α → 0` limit of the rescaled gradient flow as a sequence of stages.
//!
//! Stage `k` sits at a stationary point `θ^k` from rescaled time `T_k`. Every
//! coordinate `i` carries a log-scale weight `b_i = lim log_α(u_i + v_i)`; the
//! next coordinate to activate is the one whose `b_i` reaches `0` or `2` first
//! when it moves at speed `−g_i(θ^k)`. After activation the weights settle to
//! the next stationary point on the enlarged support.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradflow::flow_to_stationarity;
use crate::linalg::{distance, max_abs, norm, solve, Matrix};
use crate::model::{ModelSpec, ProductParams};
use crate::objective::{evaluate, evaluate_params, Dataset, GradientSignal, Sample, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum B0Mode {
    #[default]
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SettleConfig {
    /// Size `ε` of the seed placed on the winning coordinate.
    pub epsilon: f64,
    /// The limit check reruns with `ε / epsilon_ratio`.
    pub epsilon_ratio: f64,
    pub stationarity_tol: f64,
    pub max_settle_time: f64,
    /// Coordinates with `|u_i|` below this after settling are set to zero.
    pub support_tol: f64,
    pub rel_tol: f64,
}

impl Default for SettleConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            epsilon_ratio: 10.0,
            stationarity_tol: 1e-9,
            max_settle_time: 1e5,
            support_tol: 1e-6,
            rel_tol: 1e-10,
        }
    }
}

impl SettleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1e-2) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1e-2), got {}", self.epsilon)));
        }
        if !(self.epsilon_ratio > 1.0) {
            return Err(Error::Config("epsilon_ratio must exceed 1".into()));
        }
        for (name, v) in [
            ("stationarity_tol", self.stationarity_tol),
            ("max_settle_time", self.max_settle_time),
            ("support_tol", self.support_tol),
            ("rel_tol", self.rel_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub max_stages: usize,
    pub b0_mode: B0Mode,
    /// `g_i` counts as zero when `|g_i| ≤ zero_tol · (1 + ‖g‖∞)`.
    pub zero_tol: f64,
    /// Relative gap below which two activation times are a tie.
    pub tie_tol: f64,
    pub clamp_tol: f64,
    pub settle: SettleConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            max_stages: 64,
            b0_mode: B0Mode::Ones,
            zero_tol: 1e-10,
            tie_tol: 1e-9,
            clamp_tol: 1e-6,
            settle: SettleConfig::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_stages == 0 {
            return Err(Error::Config("max_stages must be at least 1".into()));
        }
        for (name, v) in [
            ("zero_tol", self.zero_tol),
            ("tie_tol", self.tie_tol),
            ("clamp_tol", self.clamp_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.settle.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub k: usize,
    /// Rescaled start time `T_k`.
    pub t: f64,
    pub b: Vec<f64>,
    pub theta: Theta,
    /// `sgn(v_i)` on the support, `+1` elsewhere.
    pub s: Vec<i8>,
    pub support: Vec<usize>,
    pub loss: f64,
    pub grad_norm: f64,
    /// Coordinate that activates at the end of this stage.
    pub winner: Option<usize>,
    /// `T_{k+1}`; `None` for a terminal stage.
    pub next_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Every `Δ_k(i)` is infinite.
    Infinite,
    MaxStages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<StageState>,
    pub terminal: Termination,
}

impl StageSchedule {
    /// The stage whose interval `[T_k, T_{k+1})` contains `t`.
    pub fn stage_at(&self, t: f64) -> Option<&StageState> {
        self.stages
            .iter()
            .find(|s| s.t <= t && s.next_time.is_none_or(|next| t < next))
    }

    pub fn times(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.t).collect()
    }

    /// `{stages: [{k, T_k, i_k, b, support, theta_u, theta_s, loss}], terminal}`.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            k: usize,
            #[serde(rename = "T_k")]
            t_k: f64,
            i_k: Option<usize>,
            #[serde(rename = "T_next")]
            t_next: Option<f64>,
            b: &'a [f64],
            support: &'a [usize],
            theta_u: &'a [f64],
            theta_s: &'a [i8],
            loss: f64,
            grad_norm: f64,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            stages: Vec<Row<'a>>,
            terminal: Termination,
        }
        let doc = Doc {
            stages: self
                .stages
                .iter()
                .map(|s| Row {
                    k: s.k,
                    t_k: s.t,
                    i_k: s.winner,
                    t_next: s.next_time,
                    b: &s.b,
                    support: &s.support,
                    theta_u: &s.theta.u,
                    theta_s: &s.s,
                    loss: s.loss,
                    grad_norm: s.grad_norm,
                })
                .collect(),
            terminal: self.terminal,
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `Δ_i = (b_i − 1 + sgn g_i) / g_i`, or `∞` where `|g_i| ≤ zero_tol (1 + ‖g‖∞)`.
pub fn time_until_active(b: &[f64], g: &GradientSignal, zero_tol: f64) -> Result<Vec<f64>> {
    let g = g.as_slice();
    if b.len() != g.len() {
        return Err(Error::invalid("b and g differ in length"));
    }
    let cutoff = zero_tol * (1.0 + max_abs(g));
    let mut out = Vec::with_capacity(b.len());
    for (i, (&bi, &gi)) in b.iter().zip(g).enumerate() {
        if gi.abs() <= cutoff {
            out.push(f64::INFINITY);
            continue;
        }
        let delta = (bi - 1.0 + gi.signum()) / gi;
        if delta < 0.0 {
            return Err(Error::InconsistentState(format!(
                "negative time until active for coordinate {i}: b = {bi}, g = {gi}"
            )));
        }
        out.push(delta);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Winner {
    Coordinate { index: usize, delta: f64 },
    Terminal,
}

/// Unique argmin of the activation times.
pub fn pick_winner(deltas: &[f64], tie_tol: f64) -> Result<Winner> {
    let mut best: Option<usize> = None;
    let mut second: Option<usize> = None;
    for (i, &d) in deltas.iter().enumerate() {
        if !d.is_finite() {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if d < deltas[b] => {
                second = best;
                best = Some(i);
            }
            _ => {
                if second.is_none_or(|s| d < deltas[s]) {
                    second = Some(i);
                }
            }
        }
    }
    let Some(first) = best else {
        return Ok(Winner::Terminal);
    };
    if let Some(s) = second {
        let (d1, d2) = (deltas[first], deltas[s]);
        if d2 - d1 <= tie_tol * d1.abs() {
            return Err(Error::DegenerateDynamics {
                first,
                second: s,
                first_delta: d1,
                second_delta: d2,
            });
        }
    }
    Ok(Winner::Coordinate {
        index: first,
        delta: deltas[first],
    })
}

/// `b − g Δ*`, snapped onto `[0, 2]` within `clamp_tol`; the winner is snapped
/// to the nearer of `0` and `2`.
pub fn update_log_weights(
    b: &[f64],
    g: &GradientSignal,
    delta_star: f64,
    winner: usize,
    clamp_tol: f64,
) -> Result<Vec<f64>> {
    if !delta_star.is_finite() {
        return Err(Error::invalid("delta_star must be finite"));
    }
    let g = g.as_slice();
    let mut out = Vec::with_capacity(b.len());
    for (i, (&bi, &gi)) in b.iter().zip(g).enumerate() {
        let raw = bi - gi * delta_star;
        let value = if i == winner {
            let target = if (raw - 0.0).abs() <= (raw - 2.0).abs() { 0.0 } else { 2.0 };
            if (raw - target).abs() > clamp_tol {
                return Err(Error::InconsistentState(format!(
                    "winner {i} lands at b = {raw}, not in {{0, 2}}"
                )));
            }
            target
        } else if raw < -clamp_tol || raw > 2.0 + clamp_tol {
            return Err(Error::InconsistentState(format!("b_{i} = {raw} left [0, 2]")));
        } else {
            raw.clamp(0.0, 2.0)
        };
        out.push(value);
    }
    Ok(out)
}

fn support_of(theta: &Theta) -> Vec<usize> {
    (0..theta.p()).filter(|&i| theta.u[i] != 0.0).collect()
}

fn signs_of(theta: &Theta) -> Vec<i8> {
    theta
        .u
        .iter()
        .zip(&theta.v)
        .map(|(&u, &v)| if u != 0.0 && v < 0.0 { -1 } else { 1 })
        .collect()
}

fn grad_norm(theta: &Theta, g: &GradientSignal) -> f64 {
    norm(&theta.loss_gradient(g))
}

/// Newton iteration on `g_S(c) = 0` over the active products, with a
/// central-difference Jacobian. Returns `None` if it fails to reduce `‖g_S‖`.
fn polish(spec: &ModelSpec, dataset: &Dataset, theta: &Theta, active: &[usize], target: f64) -> Result<Option<Theta>> {
    let refs: Vec<&Sample> = dataset.samples.iter().collect();
    let mut c = theta.products();
    let restricted = |c: &ProductParams| -> Result<Vec<f64>> {
        let ev = evaluate_params(spec, &refs, c)?;
        Ok(active.iter().map(|&i| ev.g.0[i]).collect())
    };
    let mut gs = restricted(&c)?;
    let start = norm(&gs);
    let m = active.len();
    for _ in 0..12 {
        if norm(&gs) <= target {
            break;
        }
        let mut jac = Matrix::zeros(m, m);
        for (col, &j) in active.iter().enumerate() {
            let h = 1e-6 * (1.0 + c.0[j].abs());
            let mut plus = c.clone();
            plus.0[j] += h;
            let mut minus = c.clone();
            minus.0[j] -= h;
            let (gp, gm) = (restricted(&plus)?, restricted(&minus)?);
            for row in 0..m {
                jac[(row, col)] = (gp[row] - gm[row]) / (2.0 * h);
            }
        }
        let Ok(step) = solve(&jac, &gs) else {
            return Ok(None);
        };
        let mut next = c.clone();
        for (k, &j) in active.iter().enumerate() {
            next.0[j] -= step[k];
        }
        let g_next = restricted(&next)?;
        if norm(&g_next) >= norm(&gs) {
            break;
        }
        c = next;
        gs = g_next;
    }
    if !(norm(&gs) < start) {
        return Ok(None);
    }
    let mut out = theta.clone();
    for &i in active {
        let root = c.0[i].abs().sqrt();
        if (c.0[i] > 0.0) != (theta.v[i] > 0.0) {
            return Ok(None);
        }
        out.u[i] = root;
        out.v[i] = c.0[i].signum() * root;
    }
    Ok(Some(out))
}

fn settle_once(
    spec: &ModelSpec,
    dataset: &Dataset,
    theta_k: &Theta,
    winner: usize,
    g_winner: f64,
    epsilon: f64,
    stage: usize,
    cfg: &SettleConfig,
) -> Result<Theta> {
    let mut start = theta_k.clone();
    start.u[winner] += epsilon;
    start.v[winner] += g_winner.signum() * epsilon;
    let mut mask: Vec<bool> = theta_k.u.iter().map(|&u| u != 0.0).collect();
    mask[winner] = true;

    // the seeded coordinate needs about ln(1/ε)/|g| to reach O(1)
    let escape = 1.5 * (1.0 / epsilon).ln() / g_winner.abs();
    let coarse = (cfg.stationarity_tol * 1e3).max(1e-7);
    let run = flow_to_stationarity(spec, dataset, &start, &mask, cfg.rel_tol, coarse, escape, cfg.max_settle_time)?;
    if !run.converged {
        return Err(Error::NonConvergentStage {
            stage,
            max_time: cfg.max_settle_time,
            grad_norm: run.grad_norm,
        });
    }
    let mut theta = run.theta;
    for i in 0..theta.p() {
        if theta.u[i].abs() <= cfg.support_tol {
            theta.u[i] = 0.0;
            theta.v[i] = 0.0;
        }
    }
    let active = support_of(&theta);
    let target = cfg.stationarity_tol * 1e-3;
    if let Some(polished) = polish(spec, dataset, &theta, &active, target)? {
        theta = polished;
    }
    let ev = evaluate(spec, dataset, &theta)?;
    let gn = grad_norm(&theta, &ev.g);
    if gn > cfg.stationarity_tol {
        // polishing stalled; finish with the flow itself
        let mask: Vec<bool> = theta.u.iter().map(|&u| u != 0.0).collect();
        let run = flow_to_stationarity(
            spec,
            dataset,
            &theta,
            &mask,
            cfg.rel_tol,
            cfg.stationarity_tol * 1e-2,
            0.0,
            cfg.max_settle_time,
        )?;
        if !run.converged {
            return Err(Error::NonConvergentStage {
                stage,
                max_time: cfg.max_settle_time,
                grad_norm: run.grad_norm,
            });
        }
        theta = run.theta;
    }
    Ok(theta)
}

/// Settles `θ^k` after coordinate `winner` activates: the flow from
/// `θ^k + ε (e_i, sgn(g_i) e_i)` restricted to `supp(θ^k) ∪ {i}`, run at `ε`
/// and `ε / epsilon_ratio`, which must agree within `10 · stationarity_tol`.
pub fn settle_stage(
    spec: &ModelSpec,
    dataset: &Dataset,
    stage: &StageState,
    winner: usize,
    settle: &SettleConfig,
) -> Result<(Theta, Vec<i8>)> {
    settle.validate()?;
    let ev = evaluate(spec, dataset, &stage.theta)?;
    let gw = ev.g.0[winner];
    if gw == 0.0 {
        return Err(Error::invalid(format!("coordinate {winner} has zero gradient signal")));
    }
    let a = settle_once(spec, dataset, &stage.theta, winner, gw, settle.epsilon, stage.k, settle)?;
    let b = settle_once(
        spec,
        dataset,
        &stage.theta,
        winner,
        gw,
        settle.epsilon / settle.epsilon_ratio,
        stage.k,
        settle,
    )?;
    let gap = distance(&a.flat(), &b.flat());
    if gap > 10.0 * settle.stationarity_tol {
        return Err(Error::LimitUnstable {
            stage: stage.k,
            distance: gap,
        });
    }
    let s = signs_of(&b);
    Ok((b, s))
}

/// Runs the stage recursion from `θ^0 = 0`, `T_0 = 0` until every activation
/// time is infinite or `max_stages` stages have been recorded.
pub fn run_schedule(spec: &ModelSpec, dataset: &Dataset, config: &ScheduleConfig) -> Result<StageSchedule> {
    config.validate()?;
    let p = spec.p();
    let mut b = match config.b0_mode {
        B0Mode::Ones => vec![1.0; p],
        B0Mode::Zeros => vec![0.0; p],
    };
    let mut theta = Theta::zeros(p);
    let mut t = 0.0;
    let mut stages: Vec<StageState> = Vec::new();

    loop {
        let k = stages.len();
        let ev = evaluate(spec, dataset, &theta)?;
        let gn = grad_norm(&theta, &ev.g);
        if gn > config.settle.stationarity_tol {
            return Err(Error::NonConvergentStage {
                stage: k,
                max_time: config.settle.max_settle_time,
                grad_norm: gn,
            });
        }
        let support = support_of(&theta);
        // on the support g vanishes up to the settle tolerance
        let mut g = ev.g.clone();
        for &i in &support {
            g.0[i] = 0.0;
        }
        let deltas = time_until_active(&b, &g, config.zero_tol)?;
        let winner = pick_winner(&deltas, config.tie_tol)?;
        let mut state = StageState {
            k,
            t,
            b: b.clone(),
            s: signs_of(&theta),
            theta: theta.clone(),
            support: support.clone(),
            loss: ev.loss,
            grad_norm: gn,
            winner: None,
            next_time: None,
        };
        let Winner::Coordinate { index, delta } = winner else {
            stages.push(state);
            return Ok(StageSchedule {
                stages,
                terminal: Termination::Infinite,
            });
        };
        if !(delta > 0.0) {
            return Err(Error::InconsistentState(format!(
                "stage {k}: winner {index} has zero activation time"
            )));
        }
        state.winner = Some(index);
        state.next_time = Some(t + delta);
        if stages.len() + 1 == config.max_stages {
            stages.push(state);
            return Ok(StageSchedule {
                stages,
                terminal: Termination::MaxStages,
            });
        }

        let b_next = update_log_weights(&b, &g, delta, index, config.clamp_tol)?;
        let (theta_next, s_next) = settle_stage(spec, dataset, &state, index, &config.settle)?;

        let new_support = support_of(&theta_next);
        let added: Vec<usize> = new_support.iter().copied().filter(|i| !support.contains(i)).collect();
        if added.len() > 1 || added.iter().any(|&i| i != index) {
            return Err(Error::InconsistentState(format!(
                "stage {k}: support gained {added:?}, expected at most {{{index}}}"
            )));
        }
        if theta_next.u[index] != 0.0 {
            let expected: i8 = if b_next[index] == 0.0 { 1 } else { -1 };
            if s_next[index] != expected {
                return Err(Error::InconsistentState(format!(
                    "stage {k}: sign of v_{index} is {} but b = {}",
                    s_next[index], b_next[index]
                )));
            }
        }

        stages.push(state);
        b = b_next;
        theta = theta_next;
        t += delta;
    }
}
