use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use super::NeuralError;

/// Dense row-major array of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NeuralError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NeuralError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// Builds an `[rows, cols]` tensor from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NeuralError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NeuralError::Shape("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of every dimension after the first.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize), NeuralError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((1, *n)),
            s => Err(NeuralError::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

fn view(data: &[f64], rows: usize, cols: usize, trans: bool) -> ArrayView2<'_, f64> {
    if trans {
        // data holds a [cols, rows] row-major matrix; view it transposed.
        ArrayView2::from_shape((rows, cols).strides((1, rows)), data).expect("valid transposed view")
    } else {
        ArrayView2::from_shape((rows, cols), data).expect("valid view")
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is `[m, k]` after `op`, `b` is `[k, n]` after `op`, `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = view(a, m, k, trans_a);
    let bv = view(b, k, n, trans_b);
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("valid output view");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn shape_checked() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }
}
