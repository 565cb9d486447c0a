use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::QsarError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl RidgeModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>()
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| self.predict_row(r)).collect()
    }
}

/// Minimizes `‖Xw + b − y‖² + λ‖w‖²` with the intercept unpenalized, by
/// centering and solving the normal equations.
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<RidgeModel, QsarError> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(QsarError::Numeric(format!("{n} rows for {} targets", y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(QsarError::Numeric("ragged feature rows".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) || !lambda.is_finite() || lambda < 0.0 {
        return Err(QsarError::Numeric("non-finite value".into()));
    }
    let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let col_mean = DVector::from_fn(d, |j, _| xm.column(j).mean());
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - col_mean[j]);
    let yc = DVector::from_fn(n, |i, _| y[i] - y_mean);
    let mut a = xc.transpose() * &xc;
    for j in 0..d {
        a[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let w = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| QsarError::Numeric("singular normal equations".into()))?,
    };
    let bias = y_mean - w.dot(&col_mean);
    Ok(RidgeModel {
        weights: w.iter().copied().collect(),
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_linear_map() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - 3.0 * r[1] + 0.5).collect();
        let m = ridge_fit(&x, &y, 0.0).unwrap();
        assert!((m.weights[0] - 2.0).abs() < 1e-8);
        assert!((m.weights[1] + 3.0).abs() < 1e-8);
        assert!((m.bias - 0.5).abs() < 1e-8);
    }

    #[test]
    fn constant_target() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let m = ridge_fit(&x, &[4.0; 10], 1e-3).unwrap();
        assert!(m.weights[0].abs() < 1e-12);
        assert!((m.bias - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_nan() {
        assert!(ridge_fit(&[vec![f64::NAN]], &[1.0], 1e-3).is_err());
    }
}
