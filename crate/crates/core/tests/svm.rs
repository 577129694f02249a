use demads_core::features::{ClassLabel, DailySample, Provenance};
use demads_core::rng;
use demads_core::svm::{
    gram_matrix, train_binary, train_multiclass, KernelKind, SvmConfig, SvmModel,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn check_duals(m: &SvmModel) {
    for c in &m.dual_coef {
        let a = c.abs();
        assert!(a > 0.0 && a <= m.c, "alpha {a} outside (0, {}]", m.c);
    }
    let sum: f64 = m.dual_coef.iter().sum();
    assert!(sum.abs() <= 1e-8, "sum alpha*y = {sum}");
}

/// KKT: y f(x) >= 1 - tol for alpha = 0, ≈ 1 for free, <= 1 + tol at C.
fn check_kkt(m: &SvmModel, x: &[Vec<f64>], y: &[i8]) {
    for (xi, &yi) in x.iter().zip(y) {
        let alpha = m
            .support_vectors
            .iter()
            .zip(&m.dual_coef)
            .filter(|(sv, _)| *sv == xi)
            .map(|(_, c)| c.abs())
            .sum::<f64>();
        let r = f64::from(yi) * m.decision_value(xi).unwrap() - 1.0;
        if alpha == 0.0 {
            assert!(r >= -m.tol - 1e-9, "r {r}");
        } else if alpha < m.c {
            assert!(r.abs() <= m.tol + 1e-9, "r {r}");
        } else {
            assert!(r <= m.tol + 1e-9, "r {r}");
        }
    }
}

fn blobs(centres: &[(f64, f64)], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::rng_from_seed(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (k, c) in centres.iter().enumerate() {
        for _ in 0..per {
            x.push(vec![c.0 + n.sample(&mut r), c.1 + n.sample(&mut r)]);
            y.push(k);
        }
    }
    (x, y)
}

#[test]
fn symmetric_set_gives_odd_decision_function() {
    let mut r = rng::rng_from_seed(2);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..10 {
        let p = vec![r.random_range(0.2..2.0), r.random_range(-1.0..1.0)];
        x.push(p.iter().map(|v| -v).collect());
        y.push(-1);
        x.push(p);
        y.push(1);
    }
    for kernel in [KernelKind::Linear, KernelKind::Rbf { gamma: 0.5 }] {
        let cfg = SvmConfig::with_kernel(kernel);
        let m = train_binary(&x, &y, &cfg).unwrap();
        check_duals(&m);
        check_kkt(&m, &x, &y);
        for probe in [[0.3, 0.7], [-1.2, 0.1], [2.0, -0.5]] {
            let neg = [-probe[0], -probe[1]];
            let a = m.decision_value(&probe).unwrap();
            let b = m.decision_value(&neg).unwrap();
            assert!((a + b).abs() <= 2.0 * cfg.tol, "{a} vs {b}");
        }
    }
}

#[test]
fn three_blobs_linear_perfect() {
    let (x, y) = blobs(&[(0.0, 0.0), (5.0, 0.0), (0.0, 5.0)], 15, 0.5, 4);
    let labels = [ClassLabel::Correct, ClassLabel::Wrong, ClassLabel::Inverted];
    let samples: Vec<DailySample> = x
        .iter()
        .zip(&y)
        .map(|(f, k)| DailySample {
            features: f.clone(),
            label: labels[*k],
            day: 0,
            provenance: Provenance::Simulated,
        })
        .collect();
    let m = train_multiclass(&samples, &SvmConfig::with_kernel(KernelKind::Linear)).unwrap();
    assert_eq!(m.pairs.len(), 3);
    for s in &samples {
        assert_eq!(m.predict(&s.features).unwrap(), s.label);
    }
    for p in &m.pairs {
        check_duals(p);
    }

    // Grouping both malfunctions gives the two-class "correct vs abnormal" model.
    let grouped: Vec<DailySample> = samples
        .iter()
        .map(|s| DailySample {
            label: s.label.grouped(),
            ..s.clone()
        })
        .collect();
    let g = train_multiclass(&grouped, &SvmConfig::default()).unwrap();
    assert_eq!(g.labels, vec![ClassLabel::Abnormal, ClassLabel::Correct]);
    assert_eq!(g.pairs.len(), 1);
    for s in &grouped {
        assert_eq!(g.predict(&s.features).unwrap(), s.label);
    }
}

#[test]
fn training_is_deterministic() {
    let (x, y) = blobs(&[(0.0, 0.0), (1.0, 1.0)], 20, 0.8, 9);
    let y: Vec<i8> = y.iter().map(|k| if *k == 0 { -1 } else { 1 }).collect();
    let cfg = SvmConfig {
        seed: 3,
        ..SvmConfig::default()
    };
    assert_eq!(
        train_binary(&x, &y, &cfg).unwrap(),
        train_binary(&x, &y, &cfg).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn constraints_hold_on_noisy_data(seed in any::<u64>(), sigma in 0.2f64..2.0, c in 0.1f64..50.0) {
        let (x, y) = blobs(&[(0.0, 0.0), (1.5, 1.0)], 12, sigma, seed);
        let y: Vec<i8> = y.iter().map(|k| if *k == 0 { -1 } else { 1 }).collect();
        for kernel in [KernelKind::Linear, KernelKind::Rbf { gamma: 0.7 }] {
            let cfg = SvmConfig { c, seed, ..SvmConfig::with_kernel(kernel) };
            let m = train_binary(&x, &y, &cfg).unwrap();
            check_duals(&m);
            check_kkt(&m, &x, &y);
            prop_assert!(m.dual_coef.iter().any(|v| *v > 0.0));
            prop_assert!(m.dual_coef.iter().any(|v| *v < 0.0));
        }
    }

    #[test]
    fn separable_toys_fit_perfectly(seed in any::<u64>(), gap in 0.5f64..3.0) {
        let mut r = rng::rng_from_seed(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.push(vec![side * (gap + r.random_range(0.0..2.0)), r.random_range(-3.0..3.0)]);
            y.push(side as i8);
        }
        let m = train_binary(&x, &y, &SvmConfig::with_kernel(KernelKind::Linear)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            prop_assert_eq!(m.predict(xi).unwrap(), *yi);
        }
    }

    #[test]
    fn gram_is_symmetric_and_bounded(pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..12)) {
        let k = gram_matrix(&KernelKind::Rbf { gamma: 0.4 }, &pts);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                prop_assert_eq!(k[i][j], k[j][i]);
                prop_assert!(k[i][j] > 0.0 && k[i][j] <= 1.0);
            }
        }
    }
}
