mod common;

use common::*;
use diagflow::gradflow::{canonicalize_init, integrate_flow, FlowConfig};
use diagflow::objective::{generate, DataConfig, Theta};
use diagflow::stagewise::{run_schedule, ScheduleConfig, Termination};
use diagflow::Error;

#[test]
fn two_coordinate_schedule_by_hand() {
    // g(0) = (1, 0.5) and the coordinates decouple: coordinate 0 needs
    // Δ = 1/1, after which b_1 = 1 − 0.5 and Δ = 0.5/0.5.
    let data = one_hot_linear(&[2.0, 1.0]);
    let sched = run_schedule(&data.spec, &data, &ScheduleConfig::default()).unwrap();
    assert_eq!(sched.terminal, Termination::Infinite);
    assert_eq!(sched.stages.len(), 3);
    let times = sched.times();
    assert!((times[1] - 1.0).abs() < 1e-12 && (times[2] - 2.0).abs() < 1e-12, "{times:?}");
    assert_eq!(sched.stages[0].winner, Some(0));
    assert_eq!(sched.stages[1].winner, Some(1));
    let s1 = &sched.stages[1];
    assert!((s1.theta.u[0] - 2f64.sqrt()).abs() < 1e-8 && s1.theta.u[1] == 0.0);
    assert!((s1.b[1] - 0.5).abs() < 1e-12);
    let last = &sched.stages[2];
    assert!((last.theta.u[1] - 1.0).abs() < 1e-8 && last.loss < 1e-16);
}

/// Time at which `u_0 v_0` of the rescaled flow first reaches half its
/// limit, located on a fine snapshot grid.
fn crossing_time(alpha: f64) -> f64 {
    let data = one_hot_linear(&[2.0, 1.0]);
    let theta0 = canonicalize_init(&Theta::new(vec![1.0, 1.0], vec![0.5, 0.5]).unwrap().scaled(alpha)).unwrap().0;
    let cfg = FlowConfig {
        alpha,
        t_end: 1.5,
        snapshot_grid: (1..=1500).map(|i| i as f64 * 1e-3).collect(),
        ..FlowConfig::default()
    };
    let traj = integrate_flow(&data.spec, &data, &theta0, &cfg).unwrap();
    traj.snapshots
        .iter()
        .find(|s| s.theta.u[0] * s.theta.v[0] >= 1.0)
        .expect("coordinate 0 activates before t = 1.5")
        .t
}

#[test]
fn first_transition_time_is_the_small_alpha_limit() {
    let errors: Vec<f64> = [1e-4, 1e-8, 1e-16, 1e-32].iter().map(|&a| (crossing_time(a) - 1.0).abs()).collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    assert!(errors[3] < 0.02, "{errors:?}");
}

#[test]
fn invariants_on_random_linear_problems() {
    for seed in 0..4 {
        let (data, _) = generate(&DataConfig {
            kind: diagflow::model::ModelKind::LinearDiagonal,
            n: 1,
            d: 5,
            num_samples: 40,
            seed,
            ..DataConfig::default()
        })
        .unwrap();
        let sched = run_schedule(&data.spec, &data, &ScheduleConfig::default()).unwrap();
        let times = sched.times();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        for w in sched.stages.windows(2) {
            assert!(w[1].support.len() <= w[0].support.len() + 1);
        }
        for s in &sched.stages {
            assert!(s.b.iter().all(|&b| (0.0..=2.0).contains(&b)));
            assert!(s.grad_norm <= 1e-9, "stage {} gradient {:e}", s.k, s.grad_norm);
        }
    }
}

#[test]
fn symmetric_coordinates_tie() {
    let data = one_hot_linear(&[1.0, 1.0]);
    let err = run_schedule(&data.spec, &data, &ScheduleConfig::default()).unwrap_err();
    assert!(matches!(err, Error::DegenerateDynamics { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn negative_target_activates_through_b_equal_two() {
    // g_0 < 0: log weight climbs from 1 to 2 in time 1/|g_0|
    let data = one_hot_linear(&[-2.0]);
    let sched = run_schedule(&data.spec, &data, &ScheduleConfig::default()).unwrap();
    assert_eq!(sched.stages.len(), 2);
    assert!((sched.stages[1].t - 0.5).abs() < 1e-12);
    assert_eq!(sched.stages[1].b, vec![2.0]);
    let th = &sched.stages[1].theta;
    assert!((th.u[0] * th.v[0] + 2.0).abs() < 1e-8);
}
