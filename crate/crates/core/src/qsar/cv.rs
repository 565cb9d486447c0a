use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::metric_map;
use super::nets::{mlp_train, resnet1d_train};
use super::ridge::ridge_fit;
use super::{ModelKind, QsarError, QsarSpec};
use crate::chem_data::TaskKind;
use crate::seeding::rng_for;
use crate::stats::{mean, sample_std};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub per_fold: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation across folds.
    pub std: BTreeMap<String, f64>,
    /// Fold index of every row.
    pub folds: Vec<usize>,
    /// Out-of-fold prediction of every row.
    pub oof: Vec<f64>,
}

/// Seeded shuffled partition into `k` folds; classification labels are
/// spread evenly across folds.
pub fn assign_folds(y: &[f64], task: TaskKind, k: usize, seed: u64) -> Result<Vec<usize>, QsarError> {
    let n = y.len();
    if k == 0 || n < k {
        return Err(QsarError::Cv(format!("{n} rows cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "cv/folds"));
    if task == TaskKind::Classification {
        order.sort_by_key(|&i| y[i] >= 0.5);
    }
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

/// Fits on the training rows and predicts the test rows. Regression targets
/// are standardized with training statistics and predictions mapped back.
pub fn fit_predict(spec: &QsarSpec, x_train: &[Vec<f64>], y_train: &[f64], x_test: &[Vec<f64>]) -> Result<Vec<f64>, QsarError> {
    spec.validate()?;
    let (m, s) = match spec.task {
        TaskKind::Regression => {
            let sd = if y_train.len() > 1 { sample_std(y_train) } else { 0.0 };
            (mean(y_train), if sd > 0.0 { sd } else { 1.0 })
        }
        TaskKind::Classification => (0.0, 1.0),
    };
    let yt: Vec<f64> = y_train.iter().map(|v| (v - m) / s).collect();
    let pred = match spec.kind {
        ModelKind::Lr => ridge_fit(x_train, &yt, spec.ridge_lambda)?.predict(x_test),
        ModelKind::Mlp => mlp_train(spec, x_train, &yt)?.predict(x_test)?,
        ModelKind::ResNet1d => resnet1d_train(spec, x_train, &yt)?.predict(x_test)?,
    };
    Ok(pred.into_iter().map(|p| p * s + m).collect())
}

fn aggregate(per_fold: &[BTreeMap<String, f64>]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for fold in per_fold {
        for (k, v) in fold {
            by_name.entry(k.clone()).or_default().push(*v);
        }
    }
    let means = by_name.iter().map(|(k, v)| (k.clone(), mean(v))).collect();
    let stds = by_name
        .iter()
        .map(|(k, v)| (k.clone(), if v.len() > 1 { sample_std(v) } else { 0.0 }))
        .collect();
    (means, stds)
}

/// k-fold cross-validation. Folds are trained in parallel on the current
/// rayon pool; results do not depend on the pool size.
pub fn kfold_cv(x: &[Vec<f64>], y: &[f64], spec: &QsarSpec, k: usize, seed: u64) -> Result<CvReport, QsarError> {
    if x.len() != y.len() {
        return Err(QsarError::Cv(format!("{} feature rows for {} targets", x.len(), y.len())));
    }
    let folds = assign_folds(y, spec.task, k, seed)?;
    let results: Vec<Result<(Vec<usize>, Vec<f64>), QsarError>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let test: Vec<usize> = (0..x.len()).filter(|&i| folds[i] == f).collect();
            let train: Vec<usize> = (0..x.len()).filter(|&i| folds[i] != f).collect();
            let xt: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let xs: Vec<Vec<f64>> = test.iter().map(|&i| x[i].clone()).collect();
            let mut fold_spec = spec.clone();
            fold_spec.seed = crate::seeding::derive_seed(spec.seed, &format!("cv/fold{f}"));
            Ok((test, fit_predict(&fold_spec, &xt, &yt, &xs)?))
        })
        .collect();
    let mut oof = vec![f64::NAN; x.len()];
    let mut per_fold = Vec::with_capacity(k);
    for r in results {
        let (test, pred) = r?;
        let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        per_fold.push(metric_map(spec.task, &truth, &pred)?);
        for (&i, p) in test.iter().zip(pred) {
            oof[i] = p;
        }
    }
    let (mean, std) = aggregate(&per_fold);
    Ok(CvReport {
        k,
        per_fold,
        mean,
        std,
        folds,
        oof,
    })
}

/// Picks the ridge penalty with the best mean cross-validated RMSE.
pub fn grid_search_ridge(x: &[Vec<f64>], y: &[f64], lambdas: &[f64], k: usize, seed: u64) -> Result<(f64, Vec<CvReport>), QsarError> {
    let mut reports = Vec::with_capacity(lambdas.len());
    let mut best = (f64::INFINITY, f64::NAN);
    for &l in lambdas {
        let mut spec = QsarSpec::linear(seed);
        spec.ridge_lambda = l;
        let r = kfold_cv(x, y, &spec, k, seed)?;
        if r.mean["rmse"] < best.0 {
            best = (r.mean["rmse"], l);
        }
        reports.push(r);
    }
    if best.1.is_nan() {
        return Err(QsarError::Spec("empty lambda grid".into()));
    }
    Ok((best.1, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_and_repeat() {
        let y: Vec<f64> = (0..23).map(|i| i as f64).collect();
        let a = assign_folds(&y, TaskKind::Regression, 5, 9).unwrap();
        assert_eq!(a, assign_folds(&y, TaskKind::Regression, 5, 9).unwrap());
        for f in 0..5 {
            let c = a.iter().filter(|&&v| v == f).count();
            assert!(c == 4 || c == 5);
        }
        assert!(assign_folds(&y, TaskKind::Regression, 24, 0).is_err());
    }

    #[test]
    fn stratified_classification_folds() {
        let y: Vec<f64> = (0..40).map(|i| if i < 10 { 1.0 } else { 0.0 }).collect();
        let a = assign_folds(&y, TaskKind::Classification, 5, 1).unwrap();
        for f in 0..5 {
            let pos = (0..40).filter(|&i| a[i] == f && y[i] == 1.0).count();
            assert_eq!(pos, 2);
        }
    }

    #[test]
    fn leave_one_out_covers_every_row() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 3.0 * r[0] + 1.0).collect();
        let rep = kfold_cv(&x, &y, &QsarSpec::linear(0), 8, 0).unwrap();
        assert_eq!(rep.per_fold.len(), 8);
        assert!(rep.oof.iter().all(|v| v.is_finite()));
        assert!(rep.mean["rmse"] < 1e-3);
        assert!(!rep.mean.contains_key("r2"));
    }
}
