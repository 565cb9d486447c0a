mod common;

use molvae_core::chem_data::TaskKind;
use molvae_core::descriptors::{noise_scale, noisy_descriptor, pearson};
use molvae_core::latent::{dataset_prior_kl, kmeans, pca2};
use molvae_core::neural::{Graph, Tensor};
use molvae_core::qsar::{assign_folds, kfold_cv, ridge_fit, QsarSpec};
use proptest::prelude::*;

#[test]
fn metric_examples_hold() {
    for (name, ok) in common::oracles::hand_examples() {
        assert!(ok, "{name}");
    }
}

#[test]
fn metric_properties_hold_on_random_instances() {
    let failures = common::oracles::random_properties(1000, 7);
    assert!(failures.is_empty(), "{failures:#?}");
}

fn matrix(n: std::ops::Range<usize>, d: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (n, d).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        mu in prop::collection::vec(-3.0..3.0f64, 1..12),
        lv_seed in prop::collection::vec(-3.0..3.0f64, 12),
    ) {
        let lv: Vec<f64> = lv_seed[..mu.len()].to_vec();
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(&[1, mu.len()], mu.clone()).unwrap());
        let l = g.constant(Tensor::new(&[1, lv.len()], lv.clone()).unwrap());
        let kl = g.kl_gaussian(m, l).unwrap();
        prop_assert!(g.value(kl).item() >= 0.0);
        let z = g.constant(Tensor::zeros(&[1, mu.len()]));
        let kl0 = g.kl_gaussian(z, z).unwrap();
        prop_assert_eq!(g.value(kl0).item(), 0.0);
        let kl_set = dataset_prior_kl(&[mu], &[lv]).unwrap();
        prop_assert!((kl_set - g.value(kl).item()).abs() < 1e-12);
    }

    #[test]
    fn weighted_cross_entropy_is_non_negative_and_weight_scale_free(
        logits in prop::collection::vec(-5.0..5.0f64, 12),
        targets in prop::collection::vec(0usize..4, 3),
        weights in prop::collection::vec(0.01..100.0f64, 4),
        scale in 0.1..10.0f64,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], logits).unwrap());
        let mask = [true, true, true];
        let a = g.weighted_cross_entropy(x, &targets, &weights, &mask).unwrap();
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let b = g.weighted_cross_entropy(x, &targets, &scaled, &mask).unwrap();
        prop_assert!(g.value(a).item() >= 0.0);
        prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-10);
    }

    #[test]
    fn kmeans_inertia_never_increases(points in matrix(6..40, 1..4), k in 1usize..5, seed in any::<u64>()) {
        let r = kmeans(&points, k, seed, 300).unwrap();
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
        }
        prop_assert!(r.assignments.iter().all(|&a| a < r.k));
        let again = kmeans(&points, k, seed, 300).unwrap();
        prop_assert_eq!(again.assignments, r.assignments);
    }

    #[test]
    fn pca_ratios_and_components_are_well_formed(points in matrix(3..30, 2..6)) {
        let Ok(p) = pca2(&points) else { return Ok(()); };
        let [a, b] = p.explained_variance_ratio;
        prop_assert!(a >= b - 1e-12 && b >= -1e-12 && a + b <= 1.0 + 1e-9);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
        prop_assert!((dot(&p.components[0], &p.components[0]) - 1.0).abs() < 1e-9);
        if b > 1e-9 {
            prop_assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-8);
        }
        let again = p.transform(&points);
        for (s, t) in p.scores.iter().zip(&again) {
            prop_assert!((s[0] - t[0]).abs() < 1e-9 && (s[1] - t[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn folds_are_balanced_and_seeded(n in 10usize..200, k in 2usize..10, seed in any::<u64>(), classify in any::<bool>()) {
        let y: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let task = if classify { TaskKind::Classification } else { TaskKind::Regression };
        let f = assign_folds(&y, task, k, seed).unwrap();
        let mut sizes = vec![0usize; k];
        for &i in &f {
            sizes[i] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(assign_folds(&y, task, k, seed).unwrap(), f);
    }

    #[test]
    fn ridge_satisfies_normal_equations(x in matrix(5..30, 1..5), lambda in 1e-4..1.0f64, noise in prop::collection::vec(-1.0..1.0f64, 30)) {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(r, e)| r.iter().sum::<f64>() + e).collect();
        let m = ridge_fit(&x, &y, lambda).unwrap();
        let d = x[0].len();
        let n = x.len() as f64;
        let xm: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let ym = y.iter().sum::<f64>() / n;
        // (XcᵀXc + λI) w = Xcᵀ(y − ȳ) on centered data.
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1e-12;
        for a in 0..d {
            let mut lhs = lambda * m.weights[a];
            let mut rhs = 0.0;
            for (r, yi) in x.iter().zip(&y) {
                let ca = r[a] - xm[a];
                lhs += ca * (0..d).map(|b| (r[b] - xm[b]) * m.weights[b]).sum::<f64>();
                rhs += ca * (yi - ym);
            }
            worst = worst.max((lhs - rhs).abs());
            scale = scale.max(rhs.abs()).max(lhs.abs());
        }
        prop_assert!(worst / scale < 1e-8, "relative residual {}", worst / scale);
        let pred_mean = m.predict(&[xm.clone()])[0];
        prop_assert!((pred_mean - ym).abs() < 1e-8 * ym.abs().max(1.0));
    }
}

#[test]
fn oof_predictions_cover_every_row_once() {
    let x: Vec<Vec<f64>> = (0..57).map(|i| vec![i as f64, (i * i % 11) as f64]).collect();
    let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - r[1]).collect();
    let rep = kfold_cv(&x, &y, &QsarSpec::linear(3), 10, 3).unwrap();
    assert_eq!(rep.oof.len(), 57);
    assert!(rep.oof.iter().all(|v| v.is_finite()));
    let mut seen = vec![0; 10];
    for &f in &rep.folds {
        seen[f] += 1;
    }
    assert_eq!(seen.iter().sum::<usize>(), 57);
    assert!(rep.per_fold.len() == 10);
}

#[test]
fn noisy_descriptor_hits_target_correlations() {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let d: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = d.iter().map(|v| 0.9 * v + 0.436 * rng.sample::<f64, _>(StandardNormal)).collect();
    let r = pearson(&d, &y).unwrap();
    for (i, t) in [0.85, 0.8, 0.7, 0.61, 0.59, 0.5, 0.43, 0.3, 0.2, 0.1].iter().enumerate() {
        let noisy = noisy_descriptor(&d, &y, *t, i as u64).unwrap();
        let got = pearson(&noisy, &y).unwrap();
        assert!((got - t).abs() <= 0.03, "target {t}: got {got} (base {r})");
    }
    assert!((noise_scale(0.8, 0.4, 1.0) - 3f64.sqrt()).abs() < 1e-12);
    assert!(noisy_descriptor(&d, &y, -0.5, 0).is_err());
}
