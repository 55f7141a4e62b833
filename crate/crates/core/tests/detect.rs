use flowattack::blackbox::{train_classifier, ClassifierConfig};
use flowattack::data::two_moons;
use flowattack::detect::{
    auroc, evaluate_detector, fit_features, latent_shift, run_detection, train_detector, DetectConfig,
    DetectionDataset, DetectorModel,
};
use flowattack::diffcore::Tensor;
use flowattack::domain::Bounds;
use flowattack::flow::FlowModel;
use flowattack::rng::stream;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Three Gaussian clusters in 4-D with distinct centers.
fn clusters(n_per: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<[f64; 4]>) {
    let centers = vec![[0.0, 0.0, 0.0, 0.0], [3.0, -1.0, 2.0, 0.5], [-2.0, 4.0, 1.0, -3.0]];
    let mut rng = stream(seed, "clusters");
    let noise = Tensor::randn(&[3 * n_per, 4], 1.0, &mut rng);
    let mut data = Vec::with_capacity(12 * n_per);
    let mut labels = Vec::with_capacity(3 * n_per);
    for (c, center) in centers.iter().enumerate() {
        for r in 0..n_per {
            let row = noise.row(c * n_per + r);
            // Correlated noise so the covariance is not diagonal.
            let mixed = [row[0], 0.5 * row[0] + row[1], row[2] - 0.3 * row[1], 0.2 * row[3]];
            data.extend(mixed.iter().zip(center).map(|(a, b)| a + b));
            labels.push(c);
        }
    }
    (Tensor::new(vec![3 * n_per, 4], data).unwrap(), labels, centers)
}

/// Pooled covariance plus ridge, inverted explicitly.
fn oracle_distance(x: &Tensor, labels: &[usize], ridge: f64, v: &[f64], c: usize) -> f64 {
    let d = x.cols();
    let n = x.rows();
    let rows: Vec<&[f64]> = (0..n).filter(|&r| labels[r] == c).map(|r| x.row(r)).collect();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect();
    let class_mean = |k: usize, j: usize| {
        let rs: Vec<f64> = (0..n).filter(|&r| labels[r] == k).map(|r| x.row(r)[j]).collect();
        rs.iter().sum::<f64>() / rs.len() as f64
    };
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (r, &k) in labels.iter().enumerate().take(n) {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x.row(r)[i] - class_mean(k, i)) * (x.row(r)[j] - class_mean(k, j));
            }
        }
    }
    cov /= n as f64;
    cov += DMatrix::identity(d, d) * ridge;
    let diff = DVector::from_iterator(d, v.iter().zip(&mean).map(|(a, b)| a - b));
    let inv = cov.try_inverse().unwrap();
    (diff.transpose() * inv * diff)[(0, 0)]
}

#[test]
fn mahalanobis_matches_explicit_inverse() {
    let (x, y, _) = clusters(40, 0);
    let stats = fit_features(&x, &y, 3, 1e-2, 0).unwrap();
    let probe = [0.5, -0.25, 1.5, 2.0];
    for c in 0..3 {
        let got = stats.distance2(&probe, c).unwrap();
        let want = oracle_distance(&x, &y, 1e-2, &probe, c);
        assert!((got - want).abs() <= 1e-9 * want.max(1.0), "class {c}: {got} vs {want}");
    }
}

#[test]
fn class_means_land_near_cluster_centers() {
    let (x, y, centers) = clusters(2000, 1);
    let stats = fit_features(&x, &y, 3, 1e-3, 0).unwrap();
    for (m, c) in stats.means.iter().zip(&centers) {
        for (a, b) in m.iter().zip(c) {
            assert!((a - b).abs() < 0.1, "{a} vs {b}");
        }
    }
}

#[test]
fn scores_are_invariant_to_affine_feature_maps() {
    let (x, y, _) = clusters(60, 2);
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            2.0, 0.3, 0.0, 0.0, 0.0, 1.5, -0.4, 0.0, 0.1, 0.0, 0.7, 0.2, 0.0, 0.0, 0.5, 3.0,
        ],
    );
    let b = DVector::from_row_slice(&[1.0, -2.0, 0.5, 4.0]);
    let map = |t: &Tensor| {
        let data = (0..t.rows())
            .flat_map(|r| {
                (&a * DVector::from_row_slice(t.row(r)) + &b)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![t.rows(), 4], data).unwrap()
    };
    let ridge = 1e-10;
    let s1 = fit_features(&x, &y, 3, ridge, 0).unwrap();
    let s2 = fit_features(&map(&x), &y, 3, ridge, 0).unwrap();
    let probes = Tensor::randn(&[20, 4], 2.0, &mut stream(2, "probe"));
    for (u, v) in s1
        .scores(&probes)
        .unwrap()
        .iter()
        .zip(s2.scores(&map(&probes)).unwrap())
    {
        assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0), "{u} vs {v}");
    }
}

#[test]
fn shuffled_labels_give_chance_auroc() {
    let scores = Tensor::randn(&[2000], 1.0, &mut stream(3, "scores"));
    let mut labels: Vec<bool> = (0..2000).map(|i| i % 2 == 0).collect();
    let mut rng = stream(3, "shuffle");
    let mut total = 0.0;
    for _ in 0..20 {
        labels.shuffle(&mut rng);
        total += auroc(scores.data(), &labels).unwrap();
    }
    assert!((total / 20.0 - 0.5).abs() <= 0.05);
}

#[test]
fn evaluation_ignores_training_rows() {
    let mut rng = stream(4, "ds");
    let mk = |shift: f64, rng: &mut rand_chacha::ChaCha8Rng| Tensor::randn(&[100, 2], 1.0, rng).map(|v| v + shift);
    let clean = mk(0.0, &mut rng);
    let noisy = mk(0.0, &mut rng);
    let adv = mk(1.5, &mut rng);
    let ds = DetectionDataset::from_scores(clean, noisy, adv, 0.1, &mut rng).unwrap();
    assert_eq!(ds.train_idx.len(), 30);
    let mut all: Vec<usize> = ds.train_idx.iter().chain(&ds.eval_idx).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..300).collect::<Vec<_>>());

    let model = train_detector(&ds).unwrap();
    let before = evaluate_detector(&model, &ds).unwrap();
    let mut poisoned = ds.clone();
    for &i in &ds.train_idx {
        let cols = poisoned.features.cols();
        poisoned.features.data_mut()[i * cols..(i + 1) * cols].fill(f64::NAN);
    }
    assert_eq!(evaluate_detector(&model, &poisoned).unwrap(), before);
    assert_eq!(before.n_eval, 270);
    assert!(before.auroc > 0.8);
}

#[test]
fn detector_fit_is_deterministic() {
    let x = Tensor::randn(&[200, 3], 1.0, &mut stream(5, "x"));
    let y: Vec<bool> = (0..200).map(|r| x.row(r)[0] + 0.5 * x.row(r)[2] > 0.1).collect();
    let a = DetectorModel::fit(&x, &y).unwrap();
    let b = DetectorModel::fit(&x, &y).unwrap();
    assert_eq!(a.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
}

#[test]
fn full_protocol_separates_far_out_inputs() {
    let mut rng = stream(6, "moons");
    let data = two_moons(600, 0.1, &mut rng);
    let (clf, _) = train_classifier(&data, &ClassifierConfig::default(), &mut stream(6, "clf")).unwrap();
    let clean = data.x.select_rows(&(0..200).collect::<Vec<_>>());
    // Inputs pushed to a box corner sit far from both class means.
    let far = Tensor::new(vec![200, 2], (0..400).map(|_| rng.random_range(0.0..0.05)).collect()).unwrap();
    let cfg = DetectConfig {
        seed: 6,
        ..DetectConfig::default()
    };
    let r = run_detection(&clf, &data.x, &data.y, &clean, &far, "corner", Bounds::UNIT, &cfg).unwrap();
    assert!(r.auroc > 0.9, "{r:?}");
    assert_eq!(r.n_train + r.n_eval, 600);
    let again = run_detection(&clf, &data.x, &data.y, &clean, &far, "corner", Bounds::UNIT, &cfg).unwrap();
    assert_eq!(r, again);
}

#[test]
fn identical_inputs_have_zero_latent_shift() {
    let flow = FlowModel::identity(3);
    let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let s = latent_shift(&flow, &x, &x).unwrap();
    assert!(s.per_sample.iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn auroc_invariant_under_monotone_transforms(seed in 0u64..10_000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = stream(seed, "auroc");
        let scores = Tensor::randn(&[60], 1.0, &mut rng);
        let mut labels: Vec<bool> = (0..60).map(|i| i < 25).collect();
        labels.shuffle(&mut rng);
        let base = auroc(scores.data(), &labels).unwrap();
        let mapped: Vec<f64> = scores.data().iter().map(|s| (scale * s + shift).exp()).collect();
        prop_assert!((auroc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = scores.data().iter().map(|s| -s).collect();
        prop_assert!((auroc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn scores_never_exceed_zero(seed in 0u64..10_000) {
        let (x, y, _) = clusters(10, seed);
        let stats = fit_features(&x, &y, 3, 1e-2, 0).unwrap();
        let probes = Tensor::randn(&[10, 4], 3.0, &mut stream(seed, "p"));
        prop_assert!(stats.scores(&probes).unwrap().iter().all(|&s| s <= 0.0));
    }
}
