mod common;

use common::*;
use diagflow::model::{forward, jacobian, softmax_rowwise, ModelSpec, ProductParams};
use diagflow::objective::{evaluate, generate, loss, DataConfig, Theta};
use diagflow::linalg::Matrix;
use proptest::prelude::*;

fn random_pair(spec: &ModelSpec, seed: u64) -> (Vec<f64>, Matrix) {
    let mut r = rng(seed);
    let c = gauss_vec(spec.p(), 0.7, &mut r);
    let x = gauss_matrix(spec.n, spec.d, &mut r);
    (c, x)
}

#[test]
fn forward_matches_loop_implementation() {
    for spec in [ModelSpec::attention(4, 8).unwrap(), ModelSpec::linear(6).unwrap()] {
        for seed in 0..20 {
            let (c, x) = random_pair(&spec, seed);
            let ours = forward(&spec, &ProductParams(c.clone()), &x).unwrap();
            assert!(rel_err(&ours, &naive_forward(&spec, &c, &x)) < 1e-13);
        }
    }
}

#[test]
fn jacobians_match_central_differences() {
    let specs = [ModelSpec::attention(4, 8).unwrap(), ModelSpec::attention(3, 5).unwrap(), ModelSpec::linear(7).unwrap()];
    let mut worst = 0.0f64;
    for spec in specs {
        for seed in 0..100 {
            let (c, x) = random_pair(&spec, 1000 + seed);
            let jac = jacobian(&spec, &ProductParams(c.clone()), &x).unwrap();
            let fd = fd_jacobian(&spec, &c, &x, 1e-5);
            worst = worst.max(rel_err(jac.as_slice(), fd.as_slice()));
        }
    }
    assert!(worst <= 1e-6, "worst relative Jacobian error {worst:e}");
}

#[test]
fn gradient_identity_against_finite_differences() {
    let cfg = DataConfig {
        n: 3,
        d: 5,
        num_samples: 40,
        seed: 7,
        ..DataConfig::default()
    };
    let (data, _) = generate(&cfg).unwrap();
    let p = data.spec.p();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let theta = Theta::gaussian(p, 0.5, 500 + seed);
        let analytic = theta.loss_gradient(&evaluate(&data.spec, &data, &theta).unwrap().g);
        let flat = theta.flat();
        let mut fd = vec![0.0; flat.len()];
        for k in 0..flat.len() {
            let h = 1e-6 * (1.0 + flat[k].abs());
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[k] += h;
            minus[k] -= h;
            let lp = naive_loss(&data, Theta::from_flat(&plus).products().as_slice());
            let lm = naive_loss(&data, Theta::from_flat(&minus).products().as_slice());
            fd[k] = (lp - lm) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    assert!(worst <= 1e-6, "worst relative gradient error {worst:e}");
}

#[test]
fn loss_matches_compensated_sum() {
    let (data, teacher) = generate(&DataConfig {
        n: 4,
        d: 8,
        num_samples: 500,
        seed: 3,
        ..DataConfig::default()
    })
    .unwrap();
    for seed in 0..5 {
        let theta = Theta::gaussian(data.spec.p(), 0.3, seed);
        let ours = loss(&data.spec, &data, &theta).unwrap();
        let oracle = naive_loss(&data, theta.products().as_slice());
        assert!((ours - oracle).abs() <= 1e-12 * oracle, "{ours} vs {oracle}");
    }
    // noiseless teacher labels
    assert!(naive_loss(&data, teacher.params.as_slice()) < 1e-28);
}

#[test]
fn gradient_signal_is_mean_jacobian_residual() {
    let (data, _) = generate(&DataConfig {
        n: 3,
        d: 4,
        num_samples: 30,
        seed: 11,
        ..DataConfig::default()
    })
    .unwrap();
    let theta = Theta::gaussian(data.spec.p(), 0.4, 2);
    let c = theta.products();
    let mut g = vec![0.0; data.spec.p()];
    for s in &data.samples {
        let out = naive_forward(&data.spec, c.as_slice(), &s.x);
        let jac = fd_jacobian(&data.spec, c.as_slice(), &s.x, 1e-5);
        for k in 0..g.len() {
            g[k] += (0..out.len()).map(|r| jac[(r, k)] * (s.y[r] - out[r])).sum::<f64>() / data.len() as f64;
        }
    }
    let ours = evaluate(&data.spec, &data, &theta).unwrap().g;
    assert!(rel_err(ours.as_slice(), &g) < 1e-8);
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let (data, _) = generate(&DataConfig {
        n: 4,
        d: 8,
        num_samples: 700,
        seed: 5,
        ..DataConfig::default()
    })
    .unwrap();
    let theta = Theta::gaussian(data.spec.p(), 0.5, 9);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&data.spec, &data, &theta).unwrap())
    };
    let one = run(1);
    for threads in [2, 3, 8] {
        let other = run(threads);
        assert_eq!(one.loss.to_bits(), other.loss.to_bits());
        assert!(one.g.as_slice().iter().zip(other.g.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let m = Matrix::from_vec(3, 4, vals).unwrap();
        let s = softmax_rowwise(&m).unwrap();
        for r in 0..3 {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-14);
            prop_assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn head_output_is_linear_in_value_products(seed in 0u64..1000, scale in -3.0f64..3.0) {
        let spec = ModelSpec::attention(3, 4).unwrap();
        let (c, x) = random_pair(&spec, seed);
        let mut scaled = c.clone();
        for v in &mut scaled[4..] {
            *v *= scale;
        }
        let base = forward(&spec, &ProductParams(c), &x).unwrap();
        let out = forward(&spec, &ProductParams(scaled), &x).unwrap();
        for (a, b) in out.iter().zip(&base) {
            prop_assert!((a - scale * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn head_is_token_permutation_equivariant(seed in 0u64..1000) {
        let spec = ModelSpec::attention(3, 4).unwrap();
        let (c, x) = random_pair(&spec, seed);
        let perm = [2usize, 0, 1];
        let xp = Matrix::from_fn(3, 4, |r, k| x[(perm[r], k)]);
        let c = ProductParams(c);
        let y = forward(&spec, &c, &x).unwrap();
        let yp = forward(&spec, &c, &xp).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                prop_assert!((yp[r * 4 + j] - y[perm[r] * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_depends_only_on_products(seed in 0u64..500, s in 0.2f64..5.0) {
        let (data, _) = generate(&DataConfig { n: 2, d: 3, num_samples: 20, seed: 1, ..DataConfig::default() }).unwrap();
        let theta = Theta::gaussian(data.spec.p(), 0.6, seed);
        let rebalanced = Theta::new(
            theta.u.iter().map(|u| u * s).collect(),
            theta.v.iter().map(|v| v / s).collect(),
        ).unwrap();
        let a = evaluate(&data.spec, &data, &theta).unwrap();
        let b = evaluate(&data.spec, &data, &rebalanced).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * (1.0 + a.loss));
        prop_assert!(rel_err(b.g.as_slice(), a.g.as_slice()) < 1e-12);
    }
}
