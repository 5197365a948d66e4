//! Dense layers and activations with explicit backward passes.

use super::matrix::DenseMatrix;

/// `y = x·W + b`
pub fn linear(x: &DenseMatrix, w: &DenseMatrix, b: Option<&DenseMatrix>) -> DenseMatrix {
    let mut y = x.matmul(w);
    if let Some(b) = b {
        y.add_row(b);
    }
    y
}

/// Gradients of [`linear`]: returns `(dx, dW, db)`.
pub fn linear_backward(x: &DenseMatrix, w: &DenseMatrix, dy: &DenseMatrix) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    (dy.matmul_t(w), x.t_matmul(dy), dy.col_sums())
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through ReLU given the pre-activation `x`. The derivative at 0
/// is taken as 0.
pub fn relu_backward(x: &DenseMatrix, dy: &DenseMatrix) -> DenseMatrix {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &DenseMatrix) -> DenseMatrix {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    y
}

/// Gradient through sigmoid given its output `y`.
pub fn sigmoid_backward(y: &DenseMatrix, dy: &DenseMatrix) -> DenseMatrix {
    let mut dx = dy.clone();
    for (d, &s) in dx.data.iter_mut().zip(&y.data) {
        *d *= s * (1.0 - s);
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut y = x.clone();
    for r in 0..y.rows {
        let row = y.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    y
}

/// Gradient through softmax given its output `y`.
pub fn softmax_backward(y: &DenseMatrix, dy: &DenseMatrix) -> DenseMatrix {
    let mut dx = DenseMatrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let (s, g) = (y.row(r), dy.row(r));
        let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (si, gi)) in dx.row_mut(r).iter_mut().zip(s.iter().zip(g)) {
            *o = si * (gi - dot);
        }
    }
    dx
}

/// Index of the largest entry; the earliest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
