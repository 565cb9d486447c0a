//! Hand-derived metric examples and randomized metric properties, shared
//! by the property tests and the acceptance runner.

use molvae_core::descriptors::pearson;
use molvae_core::qsar::{accuracy, f1, r2, rmse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXACT: f64 = 1e-10;

/// `(description, passed)` for every hand-derived example.
pub fn hand_examples() -> Vec<(&'static str, bool)> {
    let close = |a: f64, b: f64| (a - b).abs() < EXACT;
    let y = [1.0, 2.0, 3.0];
    let perfect = [0.0, 1.0, 1.0, 0.0];
    // TP at 0, FP at 1, FN at 2, TN at 3.
    let labels = [1.0, 0.0, 1.0, 0.0];
    let probs = [0.9, 0.7, 0.2, 0.1];
    vec![
        ("r2(y, y) = 1", close(r2(&y, &y).unwrap(), 1.0)),
        ("rmse(y, y) = 0", close(rmse(&y, &y).unwrap(), 0.0)),
        ("accuracy of perfect labels = 1", close(accuracy(&perfect, &perfect).unwrap(), 1.0)),
        ("f1 of perfect labels = 1", close(f1(&perfect, &perfect).unwrap(), 1.0)),
        ("r2([1,2,3], [1,2,4]) = 0.5", close(r2(&y, &[1.0, 2.0, 4.0]).unwrap(), 0.5)),
        (
            "rmse([1,2,3], [1,2,4]) = sqrt(1/3)",
            close(rmse(&y, &[1.0, 2.0, 4.0]).unwrap(), (1.0f64 / 3.0).sqrt()),
        ),
        ("f1 with TP=FP=FN=1 is 0.5", close(f1(&labels, &probs).unwrap(), 0.5)),
        ("accuracy with TP=TN=1, FP=FN=1 is 0.5", close(accuracy(&labels, &probs).unwrap(), 0.5)),
        ("f1 with no positives predicted or present is 0", close(f1(&[0.0, 0.0], &[0.1, 0.2]).unwrap(), 0.0)),
        ("r2 of constant y is an error", r2(&[2.0, 2.0], &[1.0, 3.0]).is_err()),
        ("pearson([1,2,3], [2,4,6]) = 1", close(pearson(&y, &[2.0, 4.0, 6.0]).unwrap(), 1.0)),
        ("pearson([1,2,3], [6,4,2]) = -1", close(pearson(&y, &[6.0, 4.0, 2.0]).unwrap(), -1.0)),
        (
            "pearson([1,2,3,4], [1,3,2,4]) = 0.8",
            close(pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8),
        ),
        ("pearson of a constant column is an error", pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err()),
    ]
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
}

/// Failure descriptions over `instances` random cases; empty when all hold.
pub fn random_properties(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..instances {
        let n = rng.random_range(2..40);
        let y = vector(&mut rng, n);
        let yhat = vector(&mut rng, n);
        let m = y.iter().sum::<f64>() / n as f64;
        let mean_pred = vec![m; n];

        let r2_mean = r2(&y, &mean_pred).unwrap();
        if r2_mean.abs() > 1e-12 {
            failures.push(format!("case {case}: r2 of the mean predictor is {r2_mean}"));
        }
        if r2(&y, &yhat).unwrap() > 1.0 {
            failures.push(format!("case {case}: r2 above 1"));
        }
        let mse = y.iter().zip(&yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
        let e = rmse(&y, &yhat).unwrap();
        if (e * e - mse).abs() > 1e-12 * mse.max(1.0) {
            failures.push(format!("case {case}: rmse² = {} but mse = {mse}", e * e));
        }

        let labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let f = f1(&labels, &probs).unwrap();
        if !(0.0..=1.0).contains(&f) {
            failures.push(format!("case {case}: f1 = {f} outside [0,1]"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(n / 3);
        let pl: Vec<f64> = order.iter().map(|&i| labels[i]).collect();
        let pp: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
        if (f1(&pl, &pp).unwrap() - f).abs() > 1e-15 || (accuracy(&pl, &pp).unwrap() - accuracy(&labels, &probs).unwrap()).abs() > 1e-15 {
            failures.push(format!("case {case}: classification metrics changed under permutation"));
        }
        let all_negative = vec![0.0; n];
        if f1(&all_negative, &probs.iter().map(|p| p * 0.49).collect::<Vec<_>>()).unwrap() != 0.0 {
            failures.push(format!("case {case}: f1 with no positives is not 0"));
        }
        if f1(&labels, &labels).unwrap() != if labels.contains(&1.0) { 1.0 } else { 0.0 } {
            failures.push(format!("case {case}: f1 of perfect predictions"));
        }

        let r = pearson(&y, &yhat).unwrap();
        let a = rng.random_range(0.1..5.0);
        let b = rng.random_range(-5.0..5.0);
        let scaled: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        if (pearson(&scaled, &yhat).unwrap() - r).abs() > 1e-10
            || (pearson(&yhat, &y).unwrap() - r).abs() > 1e-12
            || r.abs() > 1.0 + 1e-12
        {
            failures.push(format!("case {case}: pearson symmetry, scale invariance or bound violated"));
        }
    }
    failures
}
