//! Measurements on trajectories and weight matrices.

mod convergence;
mod perturb;
pub mod spectra;
mod svd;

use serde::{Deserialize, Serialize};

pub use convergence::{
    default_probe_times, theorem_convergence_check, validate_probe, ConvergenceReport, ProbeResult,
};
pub use perturb::{
    activation_epochs, perturb_activation, perturb_plateau, perturbed_rerun, select_plateau_epochs,
    ActivationEvent, ActivationReport, PerturbMode, PlateauReport,
};
pub use spectra::{delta_spectrum, product_difference, DeltaSpectrum};
pub use svd::{singular_values, stable_rank, svd, SpectrumReport, Svd};

use crate::error::{Error, Result};
use crate::gradflow::Trajectory;
use crate::objective::Theta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Support threshold `τ` on `max(|u_i|, |v_i|)`.
    pub tau: f64,
    pub perturb_std_plateau: f64,
    pub perturb_std_activation: f64,
    pub recovery_epochs: usize,
    /// Plateau recovery passes when final distance ≤ gate · initial distance.
    pub recovery_gate: f64,
    /// Activation passes when endpoint distance ≤ gate · endpoint norm.
    pub activation_gate: f64,
    pub plateau_epochs: usize,
    pub perturb_mode: PerturbMode,
    pub seed: u64,
    pub drops: DropDetector,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tau: 1e-5,
            perturb_std_plateau: 0.05,
            perturb_std_activation: 1e-2,
            recovery_epochs: 1000,
            recovery_gate: 0.02,
            activation_gate: 0.05,
            plateau_epochs: 5,
            perturb_mode: PerturbMode::Independent,
            seed: 0,
            drops: DropDetector::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("perturb_std_plateau", self.perturb_std_plateau),
            ("perturb_std_activation", self.perturb_std_activation),
            ("recovery_gate", self.recovery_gate),
            ("activation_gate", self.activation_gate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.drops.validate()
    }
}

/// `{i : max(|u_i|, |v_i|) > τ}`.
pub fn detect_support(theta: &Theta, tau: f64) -> Vec<usize> {
    (0..theta.p())
        .filter(|&i| theta.u[i].abs().max(theta.v[i].abs()) > tau)
        .collect()
}

/// Number of product entries `|u_i v_i| > τ` among `range`.
pub fn count_products_above(theta: &Theta, range: std::ops::Range<usize>, tau: f64) -> usize {
    range.filter(|&i| (theta.u[i] * theta.v[i]).abs() > tau).count()
}

/// Largest `|u_i² − v_i² − q_i|` over snapshots, using each snapshot's
/// recorded imbalance.
pub fn conservation_drift(traj: &Trajectory) -> f64 {
    traj.snapshots
        .iter()
        .flat_map(|s| s.imbalance.iter().zip(&traj.q).map(|(a, q)| (a - q).abs()))
        .fold(0.0, f64::max)
}

/// Largest `|u_i² − v_i² − q_i|` recomputed from the stored `θ`.
pub fn reconstruction_residual(traj: &Trajectory) -> f64 {
    traj.snapshots
        .iter()
        .flat_map(|s| s.theta.imbalance().into_iter().zip(&traj.q).map(|(a, q)| (a - q).abs()))
        .fold(0.0, f64::max)
}

/// Thresholds on the log-loss decay rate `−d ln L / dt` (per unit of
/// rescaled time), measured over windows of at least `window`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropDetector {
    /// Rate above which the loss is dropping.
    pub hi: f64,
    /// Rate below which the loss is on a plateau.
    pub lo: f64,
    pub window: f64,
    /// Minimum relative loss decrease of a drop.
    pub min_drop: f64,
    /// Minimum duration of the plateau preceding a drop.
    pub min_plateau: f64,
}

impl Default for DropDetector {
    fn default() -> Self {
        Self {
            hi: 2.0,
            lo: 0.75,
            window: 0.02,
            min_drop: 0.1,
            min_plateau: 0.05,
        }
    }
}

impl DropDetector {
    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo && self.lo > 0.0) {
            return Err(Error::Config("drop detector needs hi > lo > 0".into()));
        }
        if !(self.window >= 0.0 && self.min_drop > 0.0 && self.min_drop < 1.0 && self.min_plateau >= 0.0) {
            return Err(Error::Config("drop detector window/min_drop/min_plateau out of range".into()));
        }
        Ok(())
    }

    /// Decay rate at each index, over the window starting there (the last
    /// indices reuse the final full window).
    pub fn rates(&self, times: &[f64], losses: &[f64]) -> Vec<f64> {
        let n = times.len();
        if n < 2 {
            return vec![0.0; n];
        }
        let rate = |a: usize, b: usize| {
            let dt = times[b] - times[a];
            if dt > 0.0 && losses[a] > 0.0 && losses[b] > 0.0 {
                -(losses[b] / losses[a]).ln() / dt
            } else {
                0.0
            }
        };
        let mut tail_start = n - 2;
        while tail_start > 0 && times[n - 1] - times[tail_start] < self.window {
            tail_start -= 1;
        }
        let tail = rate(tail_start, n - 1);
        let mut out = Vec::with_capacity(n);
        let mut j = 1;
        for i in 0..n {
            j = j.max(i + 1);
            while j < n && times[j] - times[i] < self.window {
                j += 1;
            }
            out.push(if j < n { rate(i, j) } else { tail });
        }
        out
    }

    /// Index ranges `[start, end]` of plateaus (rate below `lo`).
    pub fn plateaus(&self, times: &[f64], losses: &[f64]) -> Vec<(usize, usize)> {
        let rates = self.rates(times, losses);
        let mut out = Vec::new();
        let mut start = None;
        for (i, &r) in rates.iter().enumerate() {
            match (start, r < self.lo) {
                (None, true) => start = Some(i),
                (Some(s), false) => {
                    out.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, rates.len() - 1));
        }
        out
    }

    /// Plateau-then-drop events.
    pub fn detect(&self, times: &[f64], losses: &[f64]) -> Vec<LossDrop> {
        let rates = self.rates(times, losses);
        let n = rates.len();
        let mut events = Vec::new();
        let mut i = 0;
        while i < n {
            if rates[i] >= self.lo {
                i += 1;
                continue;
            }
            let plateau_start = i;
            while i < n && rates[i] < self.hi {
                i += 1;
            }
            if i == n {
                break;
            }
            // last plateau index before the rate rises above `hi`
            let mut drop_start = i;
            while drop_start > plateau_start && rates[drop_start - 1] >= self.lo {
                drop_start -= 1;
            }
            let mut end = i;
            while end < n - 1 && rates[end] >= self.lo {
                end += 1;
            }
            let plateau_len = times[drop_start] - times[plateau_start];
            let fraction = 1.0 - losses[end] / losses[drop_start];
            if plateau_len >= self.min_plateau && fraction >= self.min_drop {
                events.push(LossDrop {
                    plateau_start: times[plateau_start],
                    start: times[drop_start],
                    end: times[end],
                    plateau_start_index: plateau_start,
                    start_index: drop_start,
                    end_index: end,
                    loss_before: losses[drop_start],
                    loss_after: losses[end],
                });
            }
            i = end.max(i + 1);
        }
        events
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDrop {
    pub plateau_start: f64,
    pub start: f64,
    pub end: f64,
    pub plateau_start_index: usize,
    pub start_index: usize,
    pub end_index: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

pub fn detect_drops(traj: &Trajectory, detector: &DropDetector) -> Vec<LossDrop> {
    detector.detect(&traj.times(), &traj.losses())
}
