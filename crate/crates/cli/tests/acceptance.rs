//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use diagflow::analysis::spectra::{planted_matrix, random_orthogonal, write_matrix_csv};
use diagflow::analysis::{conservation_drift, stable_rank};
use diagflow::gradflow::{canonicalize_init, integrate_flow, Coordinates, FlowConfig, Trajectory};
use diagflow::linalg::Matrix;
use diagflow::model::{jacobian, ModelSpec, ProductParams};
use diagflow::objective::{evaluate, Theta};
use diagflow::stagewise::run_schedule;
use diagflow_cli::commands::{self, SpectraArgs, Status};
use diagflow_cli::{ExperimentConfig, Preset};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_small() -> ExperimentConfig {
    Preset::ToySmall.config()
}

fn with_out(mut cfg: ExperimentConfig, dir: &Path) -> ExperimentConfig {
    cfg.output.directory = dir.to_path_buf();
    cfg
}

fn jacobians() -> Check {
    let specs = [ModelSpec::attention(4, 8).unwrap(), ModelSpec::linear(8).unwrap()];
    let mut worst = 0.0f64;
    for spec in &specs {
        let mut r = rng(1);
        for _ in 0..100 {
            let c = gauss_vec(spec.p(), 0.7, &mut r);
            let x = gauss_matrix(spec.n, spec.d, &mut r);
            let jac = jacobian(spec, &ProductParams(c.clone()), &x).unwrap();
            worst = worst.max(rel_err(jac.as_slice(), fd_jacobian(spec, &c, &x, 1e-5).as_slice()));
        }
    }
    ensure(worst <= 1e-6, format!("worst relative error {worst:.2e} over 2 x 100 pairs"))
}

fn gradient_identity() -> Check {
    let data = toy_small().dataset().unwrap();
    let p = data.spec.p();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let theta = Theta::gaussian(p, 0.5, 100 + seed);
        let analytic = theta.loss_gradient(&evaluate(&data.spec, &data, &theta).unwrap().g);
        let flat = theta.flat();
        let fd: Vec<f64> = (0..flat.len())
            .map(|k| {
                let h = 1e-6 * (1.0 + flat[k].abs());
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[k] += h;
                minus[k] -= h;
                let lp = naive_loss(&data, Theta::from_flat(&plus).products().as_slice());
                let lm = naive_loss(&data, Theta::from_flat(&minus).products().as_slice());
                (lp - lm) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &fd));
    }
    ensure(worst <= 1e-6, format!("worst relative error {worst:.2e} at 50 points"))
}

fn toy_small_flow(alpha: f64, coordinates: Coordinates) -> Trajectory {
    let cfg = toy_small();
    let data = cfg.dataset().unwrap();
    let theta0 = canonicalize_init(&cfg.init_direction(data.spec.p()).scaled(alpha)).unwrap().0;
    let flow = FlowConfig {
        alpha,
        coordinates,
        snapshot_grid: (1..=140).map(|i| i as f64 * 0.1).collect(),
        ..cfg.flow
    };
    integrate_flow(&data.spec, &data, &theta0, &flow).unwrap()
}

fn conservation() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for alpha in [1e-2, 1e-8] {
        let direct = toy_small_flow(alpha, Coordinates::Direct);
        let max_norm = direct.snapshots.iter().map(|s| s.theta.norm()).fold(0.0, f64::max);
        let drift = conservation_drift(&direct);
        let bound = 1e-9 * (1.0 + max_norm * max_norm);
        let log = conservation_drift(&toy_small_flow(alpha, Coordinates::Log));
        ok &= drift <= bound && log == 0.0;
        lines.push(format!("a={alpha:e}: direct {drift:.2e} <= {bound:.2e}, log {log:e}"));
    }
    ensure(ok, lines.join("; "))
}

fn cross_check() -> Check {
    let log = toy_small_flow(1e-4, Coordinates::Log);
    let direct = toy_small_flow(1e-4, Coordinates::Direct);
    let worst = log
        .snapshots
        .iter()
        .zip(&direct.snapshots)
        .map(|(a, b)| rel_err(&b.theta.flat(), &a.theta.flat()))
        .fold(0.0, f64::max);
    ensure(
        worst <= 1e-6 && log.snapshots.len() == direct.snapshots.len(),
        format!("worst relative gap {worst:.2e} over {} snapshots", log.snapshots.len()),
    )
}

fn schedule_invariants() -> Check {
    let cfg = toy_small();
    let data = cfg.dataset().unwrap();
    let sched = run_schedule(&data.spec, &data, &cfg.stagewise).map_err(|e| e.to_string())?;
    let times = sched.times();
    let increasing = times.windows(2).all(|w| w[1] > w[0]);
    let growth = sched.stages.windows(2).all(|w| w[1].support.len() <= w[0].support.len() + 1);
    let worst_grad = sched.stages.iter().map(|s| s.grad_norm).fold(0.0, f64::max);
    let b_range = sched.stages.iter().all(|s| s.b.iter().all(|b| (0.0..=2.0).contains(b)));
    let winner_gap = sched
        .stages
        .windows(2)
        .filter_map(|w| w[0].winner.map(|i| w[1].b[i]))
        .map(|b| b.abs().min((b - 2.0).abs()))
        .fold(0.0, f64::max);
    ensure(
        increasing && growth && worst_grad <= 1e-9 && b_range && winner_gap <= 1e-6,
        format!(
            "{} stages, T increasing {increasing}, support +<=1 {growth}, max |grad| {worst_grad:.1e}, \
             b in [0,2] {b_range}, winner gap {winner_gap:.1e}",
            sched.stages.len()
        ),
    )
}

fn convergence() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with_out(toy_small(), tmp.path());
    let (_, rep) = commands::compare(&cfg).map_err(|e| e.to_string())?;
    let mid_stage = rep.probes.len();
    let last = rep.alphas.len() - 1;
    let worst = rep.probes.iter().map(|p| p.errors[last]).fold(0.0, f64::max);
    ensure(
        rep.alphas == [1e-2, 1e-4, 1e-8] && mid_stage >= 3 && rep.monotone && rep.loss_monotone && worst <= 0.05,
        format!(
            "{mid_stage} probes, error monotone {}, loss gap monotone {}, max error at 1e-8 {worst:.2e}",
            rep.monotone, rep.loss_monotone
        ),
    )
}

fn appendix_toy() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = with_out(Preset::ToyAppendixA.config(), tmp.path());
    cfg.flow.alpha = 0.01;
    let (_, summary) = commands::simulate(&cfg).map_err(|e| e.to_string())?;
    let kq: Vec<usize> = summary.stages.iter().filter_map(|s| s.kq_above).collect();
    let vo: Vec<usize> = summary.stages.iter().filter_map(|s| s.vo_above).collect();
    let increasing = |v: &[usize]| v.len() >= 2 && v.windows(2).all(|w| w[1] > w[0]);
    ensure(
        summary.drops.len() >= 2 && increasing(&kq) && increasing(&vo),
        format!("{} drops, KQ counts {kq:?}, VO counts {vo:?}", summary.drops.len()),
    )
}

fn validators() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with_out(toy_small(), tmp.path());
    let a = &cfg.analysis;
    let protocol = a.perturb_std_plateau == 0.05
        && a.plateau_epochs == 5
        && a.recovery_epochs == 1000
        && a.perturb_std_activation == 1e-2
        && a.recovery_gate == 0.02
        && a.activation_gate == 0.05;
    let (_, rep) = commands::validate_assumptions(&cfg).map_err(|e| e.to_string())?;
    let plateau = &rep.strict_local_minimum;
    let act = &rep.robust_dynamics;
    let max_rel = act.report.as_ref().map_or(f64::NAN, |r| r.max_relative);
    ensure(
        protocol && plateau.status == Status::Pass && plateau.reports.len() == 5 && act.status == Status::Pass,
        format!(
            "plateau {:?} max ratio {:.2e} over {} epochs; activation {:?} max relative {max_rel:.2e} over {} events",
            plateau.status,
            plateau.max_ratio.unwrap_or(f64::NAN),
            plateau.reports.len(),
            act.status,
            act.report.as_ref().map_or(0, |r| r.events.len())
        ),
    )
}

/// Checkpoints where step `k` adds a planted rank-`k` part to `W_K` and `W_V`.
fn planted_checkpoints(dir: &Path, d: usize, steps: usize) {
    let mut r = rng(7);
    let w_k0 = gauss_matrix(d, d, &mut r);
    let w_v0 = gauss_matrix(d, d, &mut r);
    let eye = Matrix::identity(d);
    let mut entries = Vec::new();
    for k in 0..=steps {
        let planted = if k == 0 {
            Matrix::zeros(d, d)
        } else {
            planted_matrix(d, d, &vec![1.0; k], 99).unwrap()
        };
        let w_k = Matrix::from_fn(d, d, |i, j| w_k0[(i, j)] + planted[(i, j)]);
        let w_v = Matrix::from_fn(d, d, |i, j| w_v0[(i, j)] + planted[(i, j)]);
        let mut entry = serde_json::json!({ "iteration": 100 * k });
        for (name, m) in [("w_k", &w_k), ("w_q", &eye), ("w_v", &w_v), ("w_o", &eye)] {
            let file = format!("{name}_{k}.csv");
            write_matrix_csv(m, &dir.join(&file)).unwrap();
            entry[name] = serde_json::Value::String(file);
        }
        entries.push(entry);
    }
    fs::write(dir.join("manifest.json"), serde_json::json!({ "checkpoints": entries }).to_string()).unwrap();
}

fn stable_ranks() -> Check {
    let sigma = [4.0, 3.0, 1.0, 0.5, 0.1];
    let expected: f64 = sigma.iter().map(|s| (s / 4.0) * (s / 4.0)).sum();
    let mut planted_err = 0.0f64;
    for (n, seed) in [(16, 1), (64, 2), (128, 3), (256, 4)] {
        let w = planted_matrix(n, n, &sigma, seed).unwrap();
        planted_err = planted_err.max((stable_rank(&w).unwrap().stable_rank - expected).abs());
    }
    let mut r = rng(3);
    let w = gauss_matrix(48, 32, &mut r);
    let base = stable_rank(&w).unwrap().stable_rank;
    let rotated = random_orthogonal(48, 5).matmul(&w).unwrap().matmul(&random_orthogonal(32, 6)).unwrap();
    let mut invariance = (stable_rank(&rotated).unwrap().stable_rank - base).abs();
    for c in [-3.0, 1e-4, 250.0] {
        invariance = invariance.max((stable_rank(&w.scale(c)).unwrap().stable_rank - base).abs());
    }

    let tmp = tempfile::tempdir().unwrap();
    let steps = 6;
    planted_checkpoints(tmp.path(), 24, steps);
    let cfg = with_out(ExperimentConfig::default(), &tmp.path().join("out"));
    let args = SpectraArgs {
        manifest: tmp.path().join("manifest.json"),
        init_iteration: None,
        tau: 1e-8,
        top_k: 4,
    };
    let (_, rows) = commands::spectra(&cfg, &args).map_err(|e| e.to_string())?;
    let sequence_err = rows
        .iter()
        .skip(1)
        .zip(1..)
        .map(|(row, k)| (row.kq.stable_rank - k as f64).abs().max((row.vo.stable_rank - k as f64).abs()))
        .fold(0.0, f64::max);
    ensure(
        planted_err <= 1e-10 && invariance <= 1e-10 && rows.len() == steps + 1 && rows[0].kq.zero && sequence_err <= 0.05,
        format!("planted error {planted_err:.1e}, invariance {invariance:.1e}, checkpoint sequence error {sequence_err:.1e}"),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_diagflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap_or(-1)
}

fn same_tree(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let count = fs::read_dir(b).unwrap().count();
    if count != names.len() {
        return Err(format!("{} vs {count} files", names.len()));
    }
    for name in &names {
        if fs::read(a.join(name)).unwrap() != fs::read(b.join(name)).map_err(|e| e.to_string())? {
            return Err(format!("{} differs", name.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    planted_checkpoints(dir, 12, 3);
    let runs: [(&str, Vec<&str>); 5] = [
        ("simulate", vec!["simulate", "--preset", "toy-appendix-a", "--alpha", "0.01"]),
        ("predict", vec!["predict", "--preset", "toy-small"]),
        ("compare", vec!["compare", "--preset", "toy-small"]),
        ("validate-assumptions", vec!["validate-assumptions", "--preset", "toy-small"]),
        ("spectra", vec!["spectra", "--manifest", "manifest.json"]),
    ];
    let mut lines = Vec::new();
    for (name, args) in runs {
        let mut codes = Vec::new();
        for rep in ["a", "b"] {
            let out = format!("{name}_{rep}");
            let mut full = args.clone();
            full.extend(["--out", out.as_str()]);
            codes.push(run_cli(&full, dir));
        }
        if codes[0] != 0 || codes[1] != 0 {
            return Err(format!("{name} exited with {codes:?}"));
        }
        let files = same_tree(&dir.join(format!("{name}_a")), &dir.join(format!("{name}_b")))
            .map_err(|e| format!("{name}: {e}"))?;
        lines.push(format!("{name} {files} files"));
    }
    Ok(format!("byte-identical: {}", lines.join(", ")))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { name: "jacobian correctness", limit: secs(10), run: jacobians },
        Criterion { name: "gradient identity", limit: secs(30), run: gradient_identity },
        Criterion { name: "conservation law", limit: secs(120), run: conservation },
        Criterion { name: "integrator cross-check", limit: secs(120), run: cross_check },
        Criterion { name: "stagewise schedule invariants", limit: secs(120), run: schedule_invariants },
        Criterion { name: "small-alpha convergence", limit: secs(600), run: convergence },
        Criterion { name: "toy head plateaus and support growth", limit: secs(900), run: appendix_toy },
        Criterion { name: "assumption validators", limit: secs(900), run: validators },
        Criterion { name: "stable-rank oracle", limit: secs(60), run: stable_ranks },
        Criterion { name: "determinism", limit: Duration::MAX, run: determinism },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} limit", c.limit)),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {} {}: {detail} [{:.1} s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
