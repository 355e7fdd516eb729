use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradflow::{canonicalize_init, integrate_flow, FlowConfig};
use crate::linalg::distance;
use crate::model::ModelSpec;
use crate::objective::{Dataset, Theta};
use crate::stagewise::StageSchedule;

const MARGIN: f64 = 0.05;

/// Stage index whose interval contains `t` with a margin of `5%` of the stage
/// length on both sides (`5%` of `max(1, T_K)` after the last transition).
pub fn validate_probe(schedule: &StageSchedule, t: f64) -> Result<usize> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidProbe {
            t,
            reason: "probe times must be positive and finite".into(),
        });
    }
    let stage = schedule.stage_at(t).ok_or_else(|| Error::InvalidProbe {
        t,
        reason: "no stage covers this time".into(),
    })?;
    let margin = match stage.next_time {
        Some(next) => MARGIN * (next - stage.t),
        None => MARGIN * stage.t.max(1.0),
    };
    let too_late = stage.next_time.is_some_and(|next| t > next - margin);
    if t < stage.t + margin || too_late {
        return Err(Error::InvalidProbe {
            t,
            reason: format!("within the transition margin of stage {}", stage.k),
        });
    }
    Ok(stage.k)
}

/// Midpoint of stage 0 plus the midpoints of the `count` longest later
/// stages, in increasing order. Transitions have width `O(1/log(1/α))`, so
/// long stages are where finite-α trajectories sit closest to `θ^k`.
pub fn default_probe_times(schedule: &StageSchedule, count: usize) -> Vec<f64> {
    let mut finite: Vec<(f64, f64)> = schedule
        .stages
        .iter()
        .skip(1)
        .filter_map(|s| s.next_time.map(|n| (n - s.t, 0.5 * (s.t + n))))
        .collect();
    finite.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut probes: Vec<f64> = finite.into_iter().take(count).map(|(_, mid)| mid).collect();
    if let Some(next) = schedule.stages.first().and_then(|s| s.next_time) {
        probes.push(0.5 * next);
    }
    probes.sort_by(f64::total_cmp);
    probes.dedup();
    probes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub t: f64,
    pub stage: usize,
    /// `‖θ_α(t) − θ^k‖`, one per α in report order.
    pub errors: Vec<f64>,
    pub losses: Vec<f64>,
    pub stage_loss: f64,
    /// Errors nonincreasing as α decreases.
    pub monotone: bool,
    /// `|L_α(t) − L(θ^k)|` nonincreasing as α decreases.
    pub loss_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Decreasing.
    pub alphas: Vec<f64>,
    pub probes: Vec<ProbeResult>,
    pub monotone: bool,
    pub loss_monotone: bool,
    /// Largest error at the smallest α.
    pub final_max_error: f64,
}

/// Runs the rescaled flow from `θ_α(0) = α θ̂₀` for each α and compares with
/// the schedule at each probe time.
pub fn theorem_convergence_check(
    spec: &ModelSpec,
    dataset: &Dataset,
    schedule: &StageSchedule,
    alphas: &[f64],
    probe_times: &[f64],
    theta_hat: &Theta,
    template: &FlowConfig,
) -> Result<ConvergenceReport> {
    if alphas.is_empty() || probe_times.is_empty() {
        return Err(Error::invalid("need at least one α and one probe time"));
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(|a, b| b.total_cmp(a));
    alphas.dedup();
    let mut probes = probe_times.to_vec();
    probes.sort_by(f64::total_cmp);
    probes.dedup();
    let stages = probes
        .iter()
        .map(|&t| validate_probe(schedule, t))
        .collect::<Result<Vec<_>>>()?;

    let runs = alphas
        .par_iter()
        .map(|&alpha| {
            let (theta0, _) = canonicalize_init(&theta_hat.scaled(alpha))?;
            let cfg = FlowConfig {
                alpha,
                rescaled: true,
                t_end: *probes.last().expect("nonempty"),
                snapshot_grid: probes.clone(),
                ..template.clone()
            };
            integrate_flow(spec, dataset, &theta0, &cfg)
        })
        .collect::<Vec<_>>();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut results = Vec::with_capacity(probes.len());
    for (j, (&t, &k)) in probes.iter().zip(&stages).enumerate() {
        let stage = &schedule.stages[k];
        let target = stage.theta.flat();
        let mut errors = Vec::with_capacity(alphas.len());
        let mut losses = Vec::with_capacity(alphas.len());
        for run in &runs {
            // snapshot 0 is t = 0; probes follow in order
            let snap = &run.snapshots[j + 1];
            debug_assert_eq!(snap.t, t);
            errors.push(distance(&snap.theta.flat(), &target));
            losses.push(snap.loss);
        }
        let gaps: Vec<f64> = losses.iter().map(|l| (l - stage.loss).abs()).collect();
        results.push(ProbeResult {
            t,
            stage: k,
            monotone: errors.windows(2).all(|w| w[1] <= w[0]),
            loss_monotone: gaps.windows(2).all(|w| w[1] <= w[0]),
            errors,
            losses,
            stage_loss: stage.loss,
        });
    }
    Ok(ConvergenceReport {
        monotone: results.iter().all(|p| p.monotone),
        loss_monotone: results.iter().all(|p| p.loss_monotone),
        final_max_error: results
            .iter()
            .map(|p| *p.errors.last().expect("nonempty"))
            .fold(0.0, f64::max),
        alphas,
        probes: results,
    })
}
