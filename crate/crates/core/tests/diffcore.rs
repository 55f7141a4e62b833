use flowattack::diffcore::{concat_cols, grad_check, Adam, GradMap, ParamSet, Tape, Tensor, Var};
use flowattack::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn single(x: Tensor) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.insert("x", x, true).unwrap();
    ps
}

/// Weighted sum so that every output element carries a distinct cotangent.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let shape = y.shape();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabc));
    let w = y.tape().constant(w)?;
    y.mul(&w)?.sum()
}

fn check_unary(seed: u64, n: usize, lo: f64, hi: f64, op: impl Fn(Var<'_>) -> Result<Var<'_>>) {
    let mut r = rng(seed);
    let data = (0..n)
        .map(|_| lo + (hi - lo) * rand::Rng::random::<f64>(&mut r))
        .collect();
    let ps = single(Tensor::new(vec![n], data).unwrap());
    let report = grad_check(|t, p| probe(op(p.var(t, "x")?)?, seed), &ps, STEP, TOL).unwrap();
    assert!(report.passed, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn elementwise_primitives_match_fd(seed in 0u64..10_000, n in 1usize..32) {
        check_unary(seed, n, -2.0, 2.0, |x| x.tanh());
        check_unary(seed, n, -2.0, 2.0, |x| x.atan());
        check_unary(seed, n, -2.0, 2.0, |x| x.exp());
        check_unary(seed, n, 0.2, 3.0, |x| x.log());
        check_unary(seed, n, -3.0, 3.0, |x| x.sigmoid());
        check_unary(seed, n, -2.0, 2.0, |x| x.leaky_relu(0.1));
        check_unary(seed, n, 0.2, 2.0, |x| x.pow(1.7));
        check_unary(seed, n, -2.0, 2.0, |x| x.pow(3.0));
        check_unary(seed, n, -2.0, 2.0, |x| x.gaussian_log_density(0.3, 0.7));
        check_unary(seed, n, -2.0, 2.0, |x| x.sum());
        check_unary(seed, n, -2.0, 2.0, |x| x.mean());
    }

    #[test]
    fn structural_primitives_match_fd(seed in 0u64..10_000, rows in 1usize..5, cols in 2usize..7) {
        let mut r = rng(seed);
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::randn(&[rows, cols], 1.0, &mut r), true).unwrap();
        ps.insert("b", Tensor::randn(&[cols, 3], 1.0, &mut r), true).unwrap();
        ps.insert("c", Tensor::randn(&[cols], 1.0, &mut r), true).unwrap();
        let labels: Vec<usize> = (0..rows).map(|i| (i + seed as usize) % 3).collect();
        let report = grad_check(
            |t, p| {
                let a = p.var(t, "a")?;
                let b = p.var(t, "b")?;
                let c = p.var(t, "c")?;
                let shifted = c.add(&a)?.mul(&a)?.sub(&c)?;
                let left = shifted.select_cols(&[cols - 1, 0])?;
                let right = shifted.slice_cols(1, cols)?.row_sum()?;
                let logits = shifted.matmul(&b)?;
                let ce = logits.softmax_cross_entropy(&labels)?;
                let joined = concat_cols(&[left, a])?;
                probe(joined, seed)?.add(&ce)?.add(&probe(right, seed + 1)?)
            },
            &ps,
            STEP,
            TOL,
        )
        .unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn broadcast_add_commutes(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..6) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[rows, cols], 1.0, &mut r);
        let b = Tensor::randn(&[cols], 1.0, &mut r);
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a).unwrap(), tape.constant(b).unwrap());
        prop_assert_eq!(va.add(&vb).unwrap().value(), vb.add(&va).unwrap().value());
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let m: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[8, 8], 1.0, &mut r)).collect();
        let left = m[0].matmul(&m[1]).unwrap().matmul(&m[2]).unwrap();
        let right = m[0].matmul(&m[1].matmul(&m[2]).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-5);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..10_000) {
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng(seed));
        let run = || {
            let tape = Tape::new();
            let v = tape.constant(x.clone()).unwrap();
            v.tanh().unwrap().exp().unwrap().row_sum().unwrap().value()
        };
        prop_assert_eq!(run(), run());
    }
}

fn mlp<'t>(t: &'t Tape, p: &ParamSet, x: &Tensor) -> Result<Var<'t>> {
    let mut h = t.constant(x.clone())?;
    for l in 0..3 {
        let w = p.var(t, &format!("w{l}"))?;
        let b = p.var(t, &format!("b{l}"))?;
        h = h.matmul(&w)?.add(&b)?;
        if l < 2 {
            h = h.leaky_relu(0.01)?;
        }
    }
    h.softmax_cross_entropy(&[0, 1, 2, 1])
}

#[test]
fn random_three_layer_network_matches_fd() {
    let mut r = rng(7);
    let dims = [6, 10, 8, 3];
    let mut ps = ParamSet::new();
    for l in 0..3 {
        ps.insert(
            format!("w{l}"),
            Tensor::randn(&[dims[l], dims[l + 1]], 0.5, &mut r),
            true,
        )
        .unwrap();
        ps.insert(format!("b{l}"), Tensor::randn(&[dims[l + 1]], 0.1, &mut r), true)
            .unwrap();
    }
    let x = Tensor::randn(&[4, 6], 1.0, &mut r);
    let report = grad_check(|t, p| mlp(t, p, &x), &ps, STEP, TOL).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.per_param.len(), 6);
}

#[test]
fn frozen_parameters_are_not_reported() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::scalar(0.5), true).unwrap();
    ps.insert("q", Tensor::scalar(2.0), false).unwrap();
    let report = grad_check(|t, p| p.var(t, "w")?.mul(&p.var(t, "q")?)?.sum(), &ps, STEP, TOL).unwrap();
    assert_eq!(report.per_param.len(), 1);
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut ps = single(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let before = ps.get("x").unwrap().as_ref().clone();
    let mut g = GradMap::default();
    g.insert("x".into(), Tensor::zeros(&[3]));
    let mut opt = Adam::new(0.0);
    for _ in 0..10 {
        opt.step(&mut ps, &g, 1e-2).unwrap();
    }
    assert_eq!(ps.get("x").unwrap().as_ref(), &before);
}

#[test]
fn adam_constant_gradient_descends() {
    let mut ps = single(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let mut g = GradMap::default();
    g.insert("x".into(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
    let mut opt = Adam::new(0.0);
    for _ in 0..50 {
        opt.step(&mut ps, &g, 1e-2).unwrap();
    }
    let x = ps.get("x").unwrap();
    assert!(x.data()[0] < 0.0 && x.data()[1] > 0.0);
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    let target = Tensor::new(vec![4], vec![1.5, -0.7, 0.2, 3.0]).unwrap();
    let mut ps = single(Tensor::randn(&[4], 2.0, &mut rng(3)));
    let mut opt = Adam::new(0.0);
    for _ in 0..2000 {
        let tape = Tape::new();
        let x = ps.var(&tape, "x").unwrap();
        let c = tape.constant(target.clone()).unwrap();
        let loss = x.sub(&c).unwrap().pow(2.0).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap().for_params(&ps);
        opt.step(&mut ps, &grads, 1e-2).unwrap();
    }
    assert!(ps.get("x").unwrap().max_abs_diff(&target) < 1e-4);
}

#[test]
fn adam_rejects_mismatched_gradient() {
    let mut ps = single(Tensor::zeros(&[2]));
    let mut g = GradMap::default();
    g.insert("x".into(), Tensor::zeros(&[3]));
    assert!(Adam::new(0.0).step(&mut ps, &g, 1e-2).is_err());
}
