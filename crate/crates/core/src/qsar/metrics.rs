use std::collections::BTreeMap;

use super::QsarError;
use crate::chem_data::TaskKind;

fn check(y: &[f64], yhat: &[f64]) -> Result<(), QsarError> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(QsarError::Numeric(format!("lengths {} and {}", y.len(), yhat.len())));
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64, QsarError> {
    check(y, yhat)?;
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if ss_tot == 0.0 {
        return Err(QsarError::DegenerateTarget);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, QsarError> {
    check(y, yhat)?;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

fn label(p: f64) -> bool {
    p >= 0.5
}

/// Fraction of probabilities that land on the right side of 0.5.
pub fn accuracy(y: &[f64], prob: &[f64]) -> Result<f64, QsarError> {
    check(y, prob)?;
    let hits = y.iter().zip(prob).filter(|(t, p)| label(**t) == label(**p)).count();
    Ok(hits as f64 / y.len() as f64)
}

/// F1 of the positive class at threshold 0.5; 0 when precision + recall is 0.
pub fn f1(y: &[f64], prob: &[f64]) -> Result<f64, QsarError> {
    check(y, prob)?;
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (t, p) in y.iter().zip(prob) {
        match (label(*t), label(*p)) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fneg += 1.0,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Task-appropriate metrics by name. An undefined R² is left out.
pub fn metric_map(task: TaskKind, y: &[f64], yhat: &[f64]) -> Result<BTreeMap<String, f64>, QsarError> {
    let mut m = BTreeMap::new();
    match task {
        TaskKind::Regression => {
            m.insert("rmse".to_string(), rmse(y, yhat)?);
            match r2(y, yhat) {
                Ok(v) => {
                    m.insert("r2".to_string(), v);
                }
                Err(QsarError::DegenerateTarget) => {}
                Err(e) => return Err(e),
            }
        }
        TaskKind::Classification => {
            m.insert("accuracy".to_string(), accuracy(y, yhat)?);
            m.insert("f1".to_string(), f1(y, yhat)?);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(f1(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn worked_regression_example() {
        let (y, p) = ([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]);
        assert!((r2(&y, &p).unwrap() - 0.5).abs() < 1e-12);
        assert!((rmse(&y, &p).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn f1_counts() {
        // TP, FP, FN, TN
        let y = [1.0, 0.0, 1.0, 0.0];
        let p = [0.9, 0.7, 0.2, 0.1];
        assert!((f1(&y, &p).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(f1(&[0.0, 0.0], &[0.1, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn constant_target_is_degenerate() {
        assert_eq!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(QsarError::DegenerateTarget));
        let m = metric_map(TaskKind::Regression, &[2.0], &[1.0]).unwrap();
        assert!(!m.contains_key("r2"));
        assert_eq!(m["rmse"], 1.0);
    }
}
