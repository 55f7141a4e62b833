use flowattack::data::two_moons;
use flowattack::diffcore::{grad_check, Tensor};
use flowattack::flow::{train_mle, FlowBuilder, FlowConfig, FlowModel, TrainConfig};
use flowattack::rng::stream;
use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

/// `ln|det J|` of `f` at `z` from a central-difference Jacobian.
fn fd_logdet(flow: &FlowModel, z: &[f64], h: f64) -> f64 {
    let d = z.len();
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut plus = z.to_vec();
        let mut minus = z.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let fp = flow
            .decode(&Tensor::new(vec![1, d], plus).unwrap())
            .unwrap()
            .flatten_rows();
        let fm = flow
            .decode(&Tensor::new(vec![1, d], minus).unwrap())
            .unwrap()
            .flatten_rows();
        for i in 0..d {
            jac[(i, j)] = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
        }
    }
    jac.lu().determinant().abs().ln()
}

fn random_flow(dim: usize, seed: u64) -> FlowModel {
    let mut cfg = FlowConfig::flat(dim, 2, 16);
    cfg.final_init_std = 0.3;
    cfg.build(&mut stream(seed, "flow")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn logdet_matches_jacobian_oracle(seed in 0u64..1000, dim_ix in 0usize..3) {
        let dim = [2, 4, 8][dim_ix];
        let flow = random_flow(dim, seed);
        let z = Tensor::randn(&[1, dim], 1.0, &mut stream(seed, "z"));
        let (_, ld) = flow.forward(&z).unwrap();
        let oracle = fd_logdet(&flow, z.data(), 1e-5);
        prop_assert!((ld[0] - oracle).abs() < 1e-3, "analytic {} oracle {}", ld[0], oracle);
    }

    #[test]
    fn round_trip_is_exact(seed in 0u64..1000, dim in 2usize..64) {
        let flow = random_flow(dim, seed);
        let z = Tensor::randn(&[4, dim], 1.0, &mut stream(seed, "z"));
        let (x, ld_f) = flow.forward(&z).unwrap();
        let (back, ld_i) = flow.inverse(&x).unwrap();
        prop_assert!(back.max_abs_diff(&z) <= 1e-4);
        let (x2, _) = flow.forward(&back).unwrap();
        prop_assert!(x2.max_abs_diff(&x) <= 1e-4);
        for r in 0..4 {
            prop_assert!((ld_f[r] + ld_i[r]).abs() < 1e-4);
        }
    }
}

#[test]
fn image_flow_logdet_matches_oracle() {
    let mut cfg = FlowConfig::image(1, 4, 4, 8);
    cfg.final_init_std = 0.2;
    let flow = cfg.build(&mut stream(5, "flow")).unwrap();
    let z = Tensor::randn(&[1, 16], 1.0, &mut stream(5, "z"));
    let (_, ld) = flow.forward(&z).unwrap();
    let oracle = fd_logdet(&flow, z.data(), 1e-5);
    assert!((ld[0] - oracle).abs() < 1e-3, "analytic {} oracle {oracle}", ld[0]);
}

#[test]
fn identity_coupling_is_exact() {
    let mut rng = stream(0, "flow");
    let flow = FlowBuilder::new(4, &mut rng)
        .hidden(8)
        .coupling_halves()
        .unwrap()
        .build();
    let z = Tensor::randn(&[3, 4], 1.0, &mut stream(0, "z"));
    let (x, ld) = flow.forward(&z).unwrap();
    assert_eq!(x, z);
    assert!(ld.iter().all(|&v| v == 0.0));
}

#[test]
fn constant_first_half_scale_gives_known_logdet() {
    // Zero weights and a bias of s on the s1 output give exp(clamp(s)) on half one.
    let mut rng = stream(0, "flow");
    let mut flow = FlowBuilder::new(4, &mut rng)
        .hidden(8)
        .coupling_halves()
        .unwrap()
        .build();
    let s = 0.4;
    flow.params_mut().set("L0.s1.b2", Tensor::full(&[2], s)).unwrap();
    let z = Tensor::randn(&[2, 4], 1.0, &mut stream(0, "z"));
    let (_, ld) = flow.forward(&z).unwrap();
    let c = flowattack::flow::soft_clamp(s, 1.5).unwrap();
    for v in ld {
        assert!((v - 2.0 * c).abs() < 1e-12);
    }
}

#[test]
fn permutation_only_model_permutes() {
    let mut rng = stream(0, "flow");
    let flow = FlowBuilder::new(3, &mut rng)
        .permutation(vec![2, 0, 1])
        .unwrap()
        .build();
    let x = Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
    let (z, ld) = flow.inverse(&x).unwrap();
    assert_eq!(z.data(), &[30.0, 10.0, 20.0]);
    assert_eq!(ld[0], 0.0);
}

#[test]
fn identity_log_prob_is_standard_normal() {
    let flow = FlowModel::identity(3);
    let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let lp = flow.log_prob(&x).unwrap()[0];
    let expected = -1.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (0.25 + 1.0 + 4.0);
    assert!((lp - expected).abs() < 1e-12);
}

#[test]
fn random_model_log_prob_matches_change_of_variables() {
    let flow = random_flow(4, 9);
    let x = Tensor::randn(&[1, 4], 0.5, &mut stream(9, "x"));
    let z = flow.encode(&x).unwrap();
    let base: f64 = z
        .data()
        .iter()
        .map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum();
    let expected = base - fd_logdet(&flow, z.data(), 1e-5);
    let lp = flow.log_prob(&x).unwrap()[0];
    assert!((lp - expected).abs() < 1e-3);
}

#[test]
fn mle_gradient_check_two_layer_flow() {
    let mut rng = stream(1, "flow");
    let flow = FlowBuilder::new(2, &mut rng)
        .hidden(6)
        .final_init_std(0.3)
        .coupling_halves()
        .unwrap()
        .random_permutation()
        .unwrap()
        .build();
    let x = Tensor::randn(&[8, 2], 1.0, &mut stream(1, "x"));
    let report = grad_check(
        |t, p| {
            let v = t.constant(x.clone())?;
            flow.nll_var(t, p, v)
        },
        flow.params(),
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn identity_coupling_log_likelihood_gradient_check() {
    let mut rng = stream(2, "flow");
    let flow = FlowBuilder::new(4, &mut rng)
        .hidden(6)
        .coupling_halves()
        .unwrap()
        .build();
    let x = Tensor::randn(&[6, 4], 1.0, &mut stream(2, "x"));
    let report = grad_check(
        |t, p| {
            let v = t.constant(x.clone())?;
            flow.nll_var(t, p, v)
        },
        flow.params(),
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn identity_samples_are_standard_normal() {
    let flow = FlowModel::identity(2);
    let s = flow.sample(5000, &mut stream(3, "sample")).unwrap();
    let normal = StatNormal::new(0.0, 1.0).unwrap();
    for c in 0..2 {
        let mut col: Vec<f64> = (0..5000).map(|r| s.data()[r * 2 + c]).collect();
        col.sort_by(f64::total_cmp);
        let n = col.len() as f64;
        let d = col
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = normal.cdf(v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic Kolmogorov-Smirnov critical value at alpha = 0.01.
        assert!(d < 1.628 / n.sqrt(), "column {c}: D = {d}");
    }
}

#[test]
fn sampling_is_seed_repeatable() {
    let flow = random_flow(3, 4);
    let a = flow.sample(10, &mut stream(7, "sample")).unwrap();
    let b = flow.sample(10, &mut stream(7, "sample")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn repeated_point_nll_decreases() {
    let mut flow = FlowConfig::flat(2, 2, 16).build(&mut stream(0, "flow")).unwrap();
    let data = Tensor::new(vec![64, 2], [0.3, 0.7].repeat(64)).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 64,
        lr_start: 1e-3,
        lr_end: 1e-3,
        ..TrainConfig::default()
    };
    let report = train_mle(&mut flow, &data, None, &cfg, &mut stream(0, "train")).unwrap();
    let nll = &report.train_nll;
    // Two-epoch moving average must decrease.
    for w in nll.windows(3) {
        assert!(w[2] + w[1] < w[0] + w[1] + 1e-9, "{nll:?}");
    }
}

#[test]
fn two_moons_training_beats_identity() {
    let data = two_moons(1000, 0.1, &mut stream(0, "data"));
    let hold = two_moons(500, 0.1, &mut stream(1, "data"));
    let mut flow = FlowConfig::flat(2, 4, 64).build(&mut stream(0, "flow")).unwrap();
    let identity_nll = {
        let lp = FlowModel::identity(2).log_prob(&hold.x).unwrap();
        -lp.iter().sum::<f64>() / lp.len() as f64
    };
    let cfg = TrainConfig {
        epochs: 200,
        lr_start: 1e-3,
        lr_end: 1e-5,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let report = train_mle(&mut flow, &data.x, Some(&hold.x), &cfg, &mut stream(0, "train")).unwrap();
    let final_nll = report.final_holdout().unwrap();
    eprintln!(
        "identity {identity_nll:.3} trained {final_nll:.3} in {:?}",
        t0.elapsed()
    );
    assert!(final_nll < identity_nll - 0.5);
}
