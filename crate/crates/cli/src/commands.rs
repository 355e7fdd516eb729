//! The five subcommands. Each writes its artifacts under the output directory
//! and returns the exit code plus any warnings; failures surface as `Error`.

use std::fs;
use std::path::{Path, PathBuf};

use diagflow::analysis::spectra::Manifest;
use diagflow::analysis::{
    conservation_drift, count_products_above, default_probe_times, delta_spectrum, detect_drops,
    perturb_activation, perturb_plateau, product_difference, select_plateau_epochs, theorem_convergence_check,
    ActivationReport, ConvergenceReport, DeltaSpectrum, LossDrop, PlateauReport,
};
use diagflow::gradflow::{
    canonicalize_init, integrate_flow, train_sgd, trajectory_file_stem, write_trajectory_csv,
    write_trajectory_jsonl, Trajectory,
};
use diagflow::model::{ModelKind, ModelSpec};
use diagflow::objective::{Dataset, Theta};
use diagflow::stagewise::{run_schedule, StageSchedule, Termination};
use diagflow::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Engine, ExperimentConfig, Format};

/// Exit code of `predict` when the schedule stops at `max_stages` instead of
/// reaching a terminal stage.
pub const EXIT_MAX_STAGES: i32 = 1;

#[derive(Debug, Default)]
pub struct Outcome {
    pub exit_code: i32,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output.directory.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

struct Problem {
    spec: ModelSpec,
    data: Dataset,
}

fn problem(cfg: &ExperimentConfig) -> Result<Problem> {
    Ok(Problem {
        spec: cfg.model_spec()?,
        data: cfg.dataset()?,
    })
}

fn initial_theta(cfg: &ExperimentConfig, p: usize) -> Result<Theta> {
    Ok(canonicalize_init(&cfg.init_direction(p).scaled(cfg.flow.alpha))?.0)
}

fn uniform_grid(t_end: f64, points: usize) -> Vec<f64> {
    (1..=points).map(|i| t_end * i as f64 / points as f64).collect()
}

fn sgd_trajectory(cfg: &ExperimentConfig, pb: &Problem) -> Result<Trajectory> {
    let theta0 = initial_theta(cfg, pb.spec.p())?;
    train_sgd(&pb.spec, &pb.data, &theta0, &cfg.sgd_config())
}

fn strided(traj: &Trajectory, stride: usize) -> Trajectory {
    if stride <= 1 {
        return traj.clone();
    }
    let last = traj.snapshots.len() - 1;
    let snapshots = traj
        .snapshots
        .iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i == last)
        .map(|(_, s)| s.clone())
        .collect();
    Trajectory {
        snapshots,
        ..traj.clone()
    }
}

fn write_trajectory(cfg: &ExperimentConfig, traj: &Trajectory, dir: &Path, out: &mut Outcome) -> Result<()> {
    let stem = trajectory_file_stem(cfg.flow.alpha, cfg.data.seed);
    let traj = strided(traj, cfg.output.stride);
    for format in &cfg.output.formats {
        let path = match format {
            Format::Csv => {
                let p = dir.join(format!("{stem}.csv"));
                write_trajectory_csv(&traj, &p)?;
                p
            }
            Format::Jsonl => {
                let p = dir.join(format!("{stem}.jsonl"));
                write_trajectory_jsonl(&traj, &p)?;
                p
            }
        };
        out.files.push(path);
    }
    Ok(())
}

/// Product counts at the end of one stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageCounts {
    pub t: f64,
    pub loss: f64,
    /// Products `|u_i v_i|` above the threshold.
    pub products_above: usize,
    /// Split into the `w_K ⊙ w_Q` and `w_V ⊙ w_O` halves for the head.
    pub kq_above: Option<usize>,
    pub vo_above: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub engine: Engine,
    pub alpha: f64,
    pub seed: u64,
    pub snapshots: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub conservation_drift: f64,
    pub max_loss_increase: f64,
    pub drops: Vec<LossDrop>,
    /// Threshold for the per-stage product counts: `max(τ, α)`. At the
    /// initial scale every product is `O(α²)`, far below α.
    pub product_threshold: f64,
    /// Counts at the onset of each drop, then at the end of the run.
    pub stages: Vec<StageCounts>,
}

/// Loss drops and per-stage product counts of a trajectory.
pub fn summarize(cfg: &ExperimentConfig, spec: &ModelSpec, traj: &Trajectory, engine: Engine) -> SimulateSummary {
    let threshold = cfg.analysis.tau.max(cfg.flow.alpha);
    let drops = detect_drops(traj, &cfg.analysis.drops);
    let p = spec.p();
    let counts = |i: usize| {
        let s = &traj.snapshots[i];
        let (kq, vo) = match spec.kind {
            ModelKind::AttentionHead => (
                Some(count_products_above(&s.theta, 0..spec.d, threshold)),
                Some(count_products_above(&s.theta, spec.d..p, threshold)),
            ),
            ModelKind::LinearDiagonal => (None, None),
        };
        StageCounts {
            t: s.t,
            loss: s.loss,
            products_above: count_products_above(&s.theta, 0..p, threshold),
            kq_above: kq,
            vo_above: vo,
        }
    };
    let mut stages: Vec<StageCounts> = drops.iter().map(|d| counts(d.start_index)).collect();
    stages.push(counts(traj.snapshots.len() - 1));
    SimulateSummary {
        engine,
        alpha: cfg.flow.alpha,
        seed: cfg.data.seed,
        snapshots: traj.snapshots.len(),
        steps: traj.steps,
        final_loss: traj.last().loss,
        conservation_drift: conservation_drift(traj),
        max_loss_increase: traj.max_loss_increase,
        drops,
        product_threshold: threshold,
        stages,
    }
}

/// Runs SGD or the flow, writes the trajectory and `summary.json`.
pub fn simulate(cfg: &ExperimentConfig) -> Result<(Outcome, SimulateSummary)> {
    let pb = problem(cfg)?;
    let traj = match cfg.simulate.engine {
        Engine::Sgd => sgd_trajectory(cfg, &pb)?,
        Engine::Flow => {
            let mut flow = cfg.flow.clone();
            if flow.snapshot_grid.is_empty() {
                flow.snapshot_grid = uniform_grid(flow.t_end, cfg.simulate.grid_points);
            }
            let theta0 = initial_theta(cfg, pb.spec.p())?;
            integrate_flow(&pb.spec, &pb.data, &theta0, &flow)?
        }
    };
    let dir = output_dir(cfg)?;
    let mut out = Outcome::default();
    write_trajectory(cfg, &traj, &dir, &mut out)?;
    let summary = summarize(cfg, &pb.spec, &traj, cfg.simulate.engine);
    let path = dir.join("summary.json");
    write_json(&summary, &path)?;
    out.files.push(path);
    Ok((out, summary))
}

/// Runs the stagewise schedule and writes `schedule.json`.
pub fn predict(cfg: &ExperimentConfig) -> Result<(Outcome, StageSchedule)> {
    let pb = problem(cfg)?;
    let schedule = run_schedule(&pb.spec, &pb.data, &cfg.stagewise)?;
    let dir = output_dir(cfg)?;
    let path = dir.join("schedule.json");
    schedule.write_json(&path)?;
    let mut out = Outcome {
        files: vec![path],
        ..Outcome::default()
    };
    if schedule.terminal == Termination::MaxStages {
        out.exit_code = EXIT_MAX_STAGES;
        out.warnings.push(format!(
            "schedule stopped at max_stages = {} before reaching a terminal stage",
            cfg.stagewise.max_stages
        ));
    }
    Ok((out, schedule))
}

/// Schedule plus the α-sweep; writes `schedule.json`, `convergence.json` and
/// `convergence.csv` (one row per probe and α).
pub fn compare(cfg: &ExperimentConfig) -> Result<(Outcome, ConvergenceReport)> {
    let pb = problem(cfg)?;
    let schedule = run_schedule(&pb.spec, &pb.data, &cfg.stagewise)?;
    let probes = if cfg.compare.probe_times.is_empty() {
        default_probe_times(&schedule, cfg.compare.probe_count)
    } else {
        cfg.compare.probe_times.clone()
    };
    let theta_hat = cfg.init_direction(pb.spec.p());
    let report = theorem_convergence_check(
        &pb.spec,
        &pb.data,
        &schedule,
        &cfg.compare.alpha_list,
        &probes,
        &theta_hat,
        &cfg.flow,
    )?;
    let dir = output_dir(cfg)?;
    let mut out = Outcome::default();
    let path = dir.join("schedule.json");
    schedule.write_json(&path)?;
    out.files.push(path);
    let path = dir.join("convergence.json");
    write_json(&report, &path)?;
    out.files.push(path);

    let mut csv = String::from("t,stage,alpha,error,loss,stage_loss\n");
    for probe in &report.probes {
        for (j, alpha) in report.alphas.iter().enumerate() {
            csv.push_str(&format!(
                "{:e},{},{:e},{:e},{:e},{:e}\n",
                probe.t, probe.stage, alpha, probe.errors[j], probe.losses[j], probe.stage_loss
            ));
        }
    }
    let path = dir.join("convergence.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    out.files.push(path);
    if !report.monotone {
        out.warnings.push("error is not monotone in α at every probe".into());
    }
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NothingToTest,
    /// `recovery_epochs = 0`: no recovery was attempted, so the gate is moot.
    NotEvaluated,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlateauSection {
    pub status: Status,
    pub gate: f64,
    pub max_ratio: Option<f64>,
    pub reports: Vec<PlateauReport>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivationSection {
    pub status: Status,
    pub gate: f64,
    pub report: Option<ActivationReport>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionsReport {
    pub alpha: f64,
    pub epochs: usize,
    pub tau: f64,
    pub strict_local_minimum: PlateauSection,
    pub robust_dynamics: ActivationSection,
}

/// Trains with SGD, then perturbs at random plateau epochs and at every
/// activation epoch; writes `assumptions.json`. A failed gate exits with 3.
pub fn validate_assumptions(cfg: &ExperimentConfig) -> Result<(Outcome, AssumptionsReport)> {
    let pb = problem(cfg)?;
    let traj = sgd_trajectory(cfg, &pb)?;
    let ac = &cfg.analysis;
    let mut out = Outcome::default();

    let plateau = match select_plateau_epochs(&traj, ac) {
        Ok(epochs) => {
            let reports = epochs
                .par_iter()
                .map(|&e| perturb_plateau(&pb.spec, &pb.data, &traj, e, ac))
                .collect::<Result<Vec<_>>>()?;
            let max_ratio = reports.iter().map(|r| r.ratio).fold(0.0, f64::max);
            let status = if ac.recovery_epochs == 0 {
                out.warnings.push("recovery_epochs = 0: plateau perturbations were not retrained".into());
                Status::NotEvaluated
            } else if max_ratio <= ac.recovery_gate {
                Status::Pass
            } else {
                Status::Fail
            };
            PlateauSection {
                status,
                gate: ac.recovery_gate,
                max_ratio: Some(max_ratio),
                reports,
                message: None,
            }
        }
        Err(Error::NothingToTest(msg)) => {
            out.warnings.push(format!("plateau validator: {msg}"));
            PlateauSection {
                status: Status::NothingToTest,
                gate: ac.recovery_gate,
                max_ratio: None,
                reports: Vec::new(),
                message: Some(msg),
            }
        }
        Err(e) => return Err(e),
    };

    let activation = match perturb_activation(&pb.spec, &pb.data, &traj, ac) {
        Ok(report) => ActivationSection {
            status: if report.max_relative <= ac.activation_gate {
                Status::Pass
            } else {
                Status::Fail
            },
            gate: ac.activation_gate,
            report: Some(report),
            message: None,
        },
        Err(Error::NothingToTest(msg)) => {
            out.warnings.push(format!("activation validator: {msg}"));
            ActivationSection {
                status: Status::NothingToTest,
                gate: ac.activation_gate,
                report: None,
                message: Some(msg),
            }
        }
        Err(e) => return Err(e),
    };

    let report = AssumptionsReport {
        alpha: cfg.flow.alpha,
        epochs: cfg.sgd.epochs,
        tau: ac.tau,
        strict_local_minimum: plateau,
        robust_dynamics: activation,
    };
    let dir = output_dir(cfg)?;
    let path = dir.join("assumptions.json");
    write_json(&report, &path)?;
    out.files.push(path);
    if report.strict_local_minimum.status == Status::Fail || report.robust_dynamics.status == Status::Fail {
        out.exit_code = 3;
    }
    Ok((out, report))
}

#[derive(Debug, Clone)]
pub struct SpectraArgs {
    pub manifest: PathBuf,
    /// Iteration of the reference checkpoint; the smallest listed by default.
    pub init_iteration: Option<u64>,
    pub tau: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectraRow {
    pub iteration: u64,
    pub kq: DeltaSpectrum,
    pub vo: DeltaSpectrum,
}

fn check_shape(m: &diagflow::linalg::Matrix, shape: (usize, usize), path: &Path) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("shape {:?} does not match {:?}", m.shape(), shape),
        });
    }
    Ok(())
}

/// Stable ranks of `Δ(W_K W_Qᵀ)` and `Δ(W_V W_Oᵀ)` relative to the reference
/// checkpoint, one row per checkpoint in manifest order; writes `spectra.csv`.
pub fn spectra(cfg: &ExperimentConfig, args: &SpectraArgs) -> Result<(Outcome, Vec<SpectraRow>)> {
    if !(args.tau > 0.0 && args.tau.is_finite()) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let manifest = Manifest::read(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let init_entry = match args.init_iteration {
        Some(it) => manifest
            .checkpoints
            .iter()
            .find(|c| c.iteration == it)
            .ok_or_else(|| Error::Config(format!("manifest has no checkpoint at iteration {it}")))?,
        None => manifest
            .checkpoints
            .iter()
            .min_by_key(|c| c.iteration)
            .expect("manifest is nonempty"),
    };
    let init = manifest.load(init_entry, base)?;
    if init.w_k.shape() != init.w_q.shape() || init.w_v.shape() != init.w_o.shape() {
        return Err(Error::Format {
            path: base.join(&init_entry.w_q),
            detail: "W_K/W_Q or W_V/W_O shapes differ".into(),
        });
    }
    let rows = manifest
        .checkpoints
        .par_iter()
        .map(|entry| {
            let ck = manifest.load(entry, base)?;
            check_shape(&ck.w_k, init.w_k.shape(), &base.join(&entry.w_k))?;
            check_shape(&ck.w_q, init.w_q.shape(), &base.join(&entry.w_q))?;
            check_shape(&ck.w_v, init.w_v.shape(), &base.join(&entry.w_v))?;
            check_shape(&ck.w_o, init.w_o.shape(), &base.join(&entry.w_o))?;
            let kq = product_difference(&ck.w_k, &ck.w_q, &init.w_k, &init.w_q)?;
            let vo = product_difference(&ck.w_v, &ck.w_o, &init.w_v, &init.w_o)?;
            Ok(SpectraRow {
                iteration: entry.iteration,
                kq: delta_spectrum(&kq, args.tau)?,
                vo: delta_spectrum(&vo, args.tau)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let k = args.top_k;
    let mut csv = String::from("iteration,stable_rank_kq,stable_rank_vo,zero_kq,zero_vo,rank_kq,rank_vo");
    for prefix in ["sigma_kq", "sigma_vo"] {
        for j in 1..=k {
            csv.push_str(&format!(",{prefix}_{j}"));
        }
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{:e},{:e},{},{},{},{}",
            r.iteration, r.kq.stable_rank, r.vo.stable_rank, r.kq.zero, r.vo.zero, r.kq.rank_above_tau, r.vo.rank_above_tau
        ));
        for s in [&r.kq.singular_values, &r.vo.singular_values] {
            for j in 0..k {
                match s.get(j) {
                    Some(v) => csv.push_str(&format!(",{v:e}")),
                    None => csv.push(','),
                }
            }
        }
        csv.push('\n');
    }
    let dir = output_dir(cfg)?;
    let path = dir.join("spectra.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    Ok((
        Outcome {
            files: vec![path],
            ..Outcome::default()
        },
        rows,
    ))
}
