//! Perturb-and-retrain experiments on SGD trajectories. Distances are taken
//! between product vectors `c = u ⊙ v`: independent noise on `u` and `v`
//! changes the conserved `u² − v²`, so only the products can return to the
//! unperturbed path.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{detect_support, AnalysisConfig};
use crate::error::{Error, Result};
use crate::gradflow::{run_sgd_segment, Origin, SgdConfig, Snapshot, Trajectory};
use crate::linalg::{distance, norm};
use crate::model::ModelSpec;
use crate::objective::{Dataset, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// Independent noise on `u_i` and `v_i`.
    #[default]
    Independent,
    /// One draw `n` per coordinate: `u_i += n`, `v_i += sgn(v_i) n`.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub epoch: usize,
    pub end_epoch: usize,
    pub perturbed: Vec<usize>,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// `final / initial`; `0` when nothing was perturbed.
    pub ratio: f64,
    /// Largest `‖θ_perturbed − θ‖∞` over the rerun.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEvent {
    pub epoch: usize,
    /// Coordinates that crossed `τ` at this epoch.
    pub coordinates: Vec<usize>,
    pub end_epoch: usize,
    pub distance: f64,
    pub reference_norm: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub events: Vec<ActivationEvent>,
    pub max_relative: f64,
}

fn sgd_origin(traj: &Trajectory) -> Result<&SgdConfig> {
    match &traj.origin {
        Origin::Sgd(c) => Ok(c),
        Origin::Flow(_) => Err(Error::invalid("perturbation reruns need an SGD trajectory")),
    }
}

fn snapshot(traj: &Trajectory, epoch: usize) -> Result<&Snapshot> {
    let direct = traj.snapshots.get(epoch).filter(|s| s.epoch == Some(epoch));
    direct
        .or_else(|| traj.snapshot_at_epoch(epoch))
        .ok_or_else(|| Error::invalid(format!("trajectory has no snapshot at epoch {epoch}")))
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_noise(theta: &Theta, targets: &[usize], std: f64, mode: PerturbMode, rng: &mut ChaCha8Rng) -> Result<Theta> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = theta.clone();
    for &i in targets {
        match mode {
            PerturbMode::Independent => {
                out.u[i] += normal.sample(rng);
                out.v[i] += normal.sample(rng);
            }
            PerturbMode::Joint => {
                let n = normal.sample(rng);
                out.u[i] += n;
                out.v[i] += theta.v[i].signum() * n;
            }
        }
    }
    Ok(out)
}

fn product_distance(a: &Theta, b: &Theta) -> f64 {
    distance(&a.products().0, &b.products().0)
}

/// Adds noise of standard deviation `std` to `targets` at `epoch`, retrains
/// for `epochs` epochs on the original minibatch sequence and compares with
/// the unperturbed trajectory at the same epoch.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_rerun(
    spec: &ModelSpec,
    dataset: &Dataset,
    traj: &Trajectory,
    epoch: usize,
    targets: &[usize],
    std: f64,
    epochs: usize,
    mode: PerturbMode,
    noise_seed: (u64, u64),
) -> Result<PlateauReport> {
    let sgd = sgd_origin(traj)?;
    let start = snapshot(traj, epoch)?;
    let end_epoch = epoch + epochs;
    let reference = snapshot(traj, end_epoch)?;
    let mut rng = noise_rng(noise_seed.0, noise_seed.1);
    let perturbed = add_noise(&start.theta, targets, std, mode, &mut rng)?;
    let initial_distance = product_distance(&perturbed, &start.theta);
    let (final_distance, max_deviation) = if epochs == 0 || targets.is_empty() {
        let dev = distance_inf(&perturbed, &start.theta);
        (initial_distance, dev)
    } else {
        let rerun = run_sgd_segment(spec, dataset, &perturbed, sgd, epoch, end_epoch, &mut 0.0)?;
        let mut dev = 0.0f64;
        for s in &rerun {
            let e = s.epoch.expect("SGD snapshots carry epochs");
            dev = dev.max(distance_inf(&s.theta, &snapshot(traj, e)?.theta));
        }
        let last = rerun.last().expect("segment includes its start");
        (product_distance(&last.theta, &reference.theta), dev)
    };
    Ok(PlateauReport {
        epoch,
        end_epoch,
        perturbed: targets.to_vec(),
        initial_distance,
        final_distance,
        ratio: if initial_distance > 0.0 {
            final_distance / initial_distance
        } else {
            0.0
        },
        max_deviation,
    })
}

fn distance_inf(a: &Theta, b: &Theta) -> f64 {
    a.flat()
        .iter()
        .zip(b.flat())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Perturbs the coordinates above `τ` at a plateau epoch with
/// `perturb_std_plateau` and retrains for `recovery_epochs`.
pub fn perturb_plateau(
    spec: &ModelSpec,
    dataset: &Dataset,
    traj: &Trajectory,
    epoch: usize,
    config: &AnalysisConfig,
) -> Result<PlateauReport> {
    config.validate()?;
    let targets = detect_support(&snapshot(traj, epoch)?.theta, config.tau);
    perturbed_rerun(
        spec,
        dataset,
        traj,
        epoch,
        &targets,
        config.perturb_std_plateau,
        config.recovery_epochs,
        config.perturb_mode,
        (config.seed, 2 * epoch as u64),
    )
}

/// Up to `plateau_epochs` random epochs `e` on a loss plateau such that the
/// coordinates above `τ` are nonempty and stay the same from the start of the
/// plateau through `e + recovery_epochs`. A coordinate that crosses `τ`
/// mid-plateau is still growing toward the next stage; perturbing it by the
/// plateau noise would skip the transition rather than test recovery.
pub fn select_plateau_epochs(traj: &Trajectory, config: &AnalysisConfig) -> Result<Vec<usize>> {
    sgd_origin(traj)?;
    let times = traj.times();
    let losses = traj.losses();
    let mut candidates = Vec::new();
    for (a, b) in config.drops.plateaus(&times, &losses) {
        let support = detect_support(&traj.snapshots[a].theta, config.tau);
        if support.is_empty() {
            continue;
        }
        // last index with the plateau's support unchanged
        let stable_end = (a..=b)
            .take_while(|&i| detect_support(&traj.snapshots[i].theta, config.tau) == support)
            .last()
            .unwrap_or(a);
        let last_epoch = traj.snapshots[stable_end].epoch.unwrap_or(0);
        for s in &traj.snapshots[a..=stable_end] {
            let e = s.epoch.unwrap_or(0);
            if e + config.recovery_epochs <= last_epoch {
                candidates.push(e);
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::NothingToTest(
            "no plateau is long enough to hold the recovery window".into(),
        ));
    }
    let mut rng = noise_rng(config.seed, u64::MAX);
    candidates.shuffle(&mut rng);
    candidates.truncate(config.plateau_epochs);
    candidates.sort_unstable();
    Ok(candidates)
}

/// Epochs at which some `max(|u_i|, |v_i|)` crosses `τ` from below, with the
/// crossing coordinates.
pub fn activation_epochs(traj: &Trajectory, tau: f64) -> Vec<(usize, Vec<usize>)> {
    traj.snapshots
        .windows(2)
        .filter_map(|w| {
            let before = detect_support(&w[0].theta, tau);
            let crossed: Vec<usize> = detect_support(&w[1].theta, tau)
                .into_iter()
                .filter(|i| !before.contains(i))
                .collect();
            (!crossed.is_empty()).then(|| (w[1].epoch.unwrap_or(0), crossed))
        })
        .collect()
}

/// Epoch at which the nonlinear evolution started at `epoch` has settled:
/// the midpoint of the first plateau beginning after `epoch` that lasts at
/// least `recovery_epochs`, or the last epoch if there is none. Shorter
/// plateaus at finite α are slow stretches inside a cascade of transitions.
fn settled_epoch(traj: &Trajectory, epoch: usize, config: &AnalysisConfig) -> usize {
    let plateaus = config.drops.plateaus(&traj.times(), &traj.losses());
    let epoch_of = |i: usize| traj.snapshots[i].epoch.unwrap_or(0);
    plateaus
        .into_iter()
        .find(|&(a, b)| epoch_of(a) > epoch && epoch_of(b) - epoch_of(a) >= config.recovery_epochs)
        .map(|(a, b)| (epoch_of(a) + epoch_of(b)) / 2)
        .unwrap_or_else(|| traj.last().epoch.unwrap_or(0))
}

/// Perturbs every coordinate above `τ` at each activation epoch with
/// `perturb_std_activation`, retrains until the unperturbed run has settled
/// on its next plateau and compares products there.
pub fn perturb_activation(
    spec: &ModelSpec,
    dataset: &Dataset,
    traj: &Trajectory,
    config: &AnalysisConfig,
) -> Result<ActivationReport> {
    config.validate()?;
    sgd_origin(traj)?;
    let events = activation_epochs(traj, config.tau);
    if events.is_empty() {
        return Err(Error::NothingToTest("no coordinate crosses τ in this trajectory".into()));
    }
    let results = events
        .par_iter()
        .map(|(epoch, coords)| {
            let theta = &snapshot(traj, *epoch)?.theta;
            let targets = detect_support(theta, config.tau);
            let epochs = settled_epoch(traj, *epoch, config) - epoch;
            let report = perturbed_rerun(
                spec,
                dataset,
                traj,
                *epoch,
                &targets,
                config.perturb_std_activation,
                epochs,
                config.perturb_mode,
                (config.seed, 2 * *epoch as u64 + 1),
            )?;
            let reference = snapshot(traj, report.end_epoch)?.theta.products();
            let reference_norm = norm(&reference.0);
            Ok(ActivationEvent {
                epoch: *epoch,
                coordinates: coords.clone(),
                end_epoch: report.end_epoch,
                distance: report.final_distance,
                reference_norm,
                relative: if reference_norm > 0.0 {
                    report.final_distance / reference_norm
                } else {
                    report.final_distance
                },
            })
        })
        .collect::<Vec<Result<ActivationEvent>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationReport {
        max_relative: results.iter().map(|e| e.relative).fold(0.0, f64::max),
        events: results,
    })
}
