//! Binary cross entropy and its weighted multi-label form.

use super::matrix::DenseMatrix;
use super::ops::sigmoid_scalar;
use crate::error::{Error, Result};

/// Probability clamp used by [`ce_loss`].
pub const CE_EPS: f64 = 1e-12;

/// `−(y·ln p + (1−y)·ln(1−p))` with `p` clamped to `[ε, 1−ε]`.
pub fn ce_loss(p_hat: f64, y: bool) -> f64 {
    let p = p_hat.clamp(CE_EPS, 1.0 - CE_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `(1/P)·Σ_p −w_p·(y_p ln σ(z_p) + (1−y_p) ln(1−σ(z_p)))`, evaluated as
/// `w_p·(softplus(z_p) − y_p·z_p)` so large logits stay finite.
pub fn weighted_bce_loss(logits: &[f64], y: &[bool], w: &[f64]) -> Result<f64> {
    check_bce_args(logits.len(), y.len(), w)?;
    let p = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&z, &t), &wp)| wp * (softplus(z) - if t { z } else { 0.0 }))
        .sum::<f64>()
        / p)
}

/// Gradient of [`weighted_bce_loss`] with respect to the logits.
pub fn weighted_bce_grad(logits: &[f64], y: &[bool], w: &[f64]) -> Result<Vec<f64>> {
    check_bce_args(logits.len(), y.len(), w)?;
    let p = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&z, &t), &wp)| wp * (sigmoid_scalar(z) - if t { 1.0 } else { 0.0 }) / p)
        .collect())
}

fn check_bce_args(n_logits: usize, n_labels: usize, w: &[f64]) -> Result<()> {
    if n_logits == 0 || n_logits != n_labels || n_logits != w.len() {
        return Err(Error::Shape(format!(
            "weighted BCE needs matching non-empty lengths, got {n_logits} logits, {n_labels} labels, {} weights",
            w.len()
        )));
    }
    if let Some(i) = w.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument(format!("intent weight w[{i}] = {} must be positive", w[i])));
    }
    Ok(())
}

/// Mean weighted BCE over the listed rows of an `n x P` logit matrix, with
/// the gradient written into the same rows of a zeroed `n x P` matrix.
pub fn weighted_bce_rows(
    logits: &DenseMatrix,
    labels: &[Vec<bool>],
    w: &[f64],
    rows: &[usize],
) -> Result<(f64, DenseMatrix)> {
    let mut grad = DenseMatrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    let scale = 1.0 / rows.len().max(1) as f64;
    for &r in rows {
        let z = logits.row(r);
        total += weighted_bce_loss(z, &labels[r], w)?;
        let g = weighted_bce_grad(z, &labels[r], w)?;
        for (o, gv) in grad.row_mut(r).iter_mut().zip(g) {
            *o = gv * scale;
        }
    }
    Ok((total * scale, grad))
}

/// Two-class cross entropy on softmax outputs, `lse(z) − z_y` per row,
/// summed over `rows`. `dlogits` is `softmax − onehot` on those rows and
/// zero elsewhere.
pub fn softmax_ce_rows(logits: &DenseMatrix, labels: &[bool], rows: &[usize], mean: bool) -> (f64, DenseMatrix) {
    assert_eq!(logits.cols, 2, "softmax CE expects two logits per row");
    let mut grad = DenseMatrix::zeros(logits.rows, 2);
    let scale = if mean { 1.0 / rows.len().max(1) as f64 } else { 1.0 };
    let mut total = 0.0;
    for &r in rows {
        let z = logits.row(r);
        let max = z[0].max(z[1]);
        let e0 = (z[0] - max).exp();
        let e1 = (z[1] - max).exp();
        let s = e0 + e1;
        let lse = max + s.ln();
        let y = labels[r] as usize;
        total += lse - z[y];
        let g = grad.row_mut(r);
        g[0] = (e0 / s - if y == 0 { 1.0 } else { 0.0 }) * scale;
        g[1] = (e1 / s - if y == 1 { 1.0 } else { 0.0 }) * scale;
    }
    (total * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_unit_values() {
        assert!((ce_loss(0.5, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_loss(1.0, true) <= 1e-11);
        assert!(ce_loss(0.0, false) <= 1e-11);
        assert!(ce_loss(0.0, true).is_finite());
    }

    #[test]
    fn ce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
            let y: bool = rng.gen();
            let yf = if y { 1.0 } else { 0.0 };
            let want = -(yf * p.ln() + (1.0 - yf) * (1.0 - p).ln());
            assert!((ce_loss(p, y) - want).abs() < 1e-12);
            assert!(ce_loss(p, y) >= 0.0);
        }
    }

    #[test]
    fn bce_unit_value_and_weight_errors() {
        let l = weighted_bce_loss(&[0.0, 0.0], &[true, false], &[1.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(weighted_bce_loss(&[0.0], &[true], &[0.0]).is_err());
        assert!(weighted_bce_loss(&[0.0], &[true], &[-1.0]).is_err());
        assert!(weighted_bce_loss(&[0.0, 1.0], &[true], &[1.0]).is_err());
    }

    #[test]
    fn bce_single_intent_is_ce_of_sigmoid() {
        // Beyond |z| ~ 15 the probability-space side loses digits in 1 - σ(z);
        // the comparison is made where both sides carry full precision.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let z: f64 = rng.gen_range(-12.0..12.0);
            let y: bool = rng.gen();
            let bce = weighted_bce_loss(&[z], &[y], &[1.0]).unwrap();
            assert!((bce - ce_loss(sigmoid_scalar(z), y)).abs() < 1e-9, "z={z} y={y}");
        }
    }

    #[test]
    fn bce_matches_unstabilized_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = rng.gen_range(1..6);
            let z: Vec<f64> = (0..p).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let y: Vec<bool> = (0..p).map(|_| rng.gen()).collect();
            let w: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..3.0)).collect();
            let naive: f64 = (0..p)
                .map(|i| {
                    let s = 1.0 / (1.0 + (-z[i]).exp());
                    let t = if y[i] { 1.0 } else { 0.0 };
                    -w[i] * (t * s.ln() + (1.0 - t) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / p as f64;
            assert!((weighted_bce_loss(&z, &y, &w).unwrap() - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let y: Vec<bool> = (0..3).map(|_| rng.gen()).collect();
            let w = [1.0, 0.5, 2.0];
            let g = weighted_bce_grad(&z, &y, &w).unwrap();
            let f = |v: &[f64]| weighted_bce_loss(v, &y, &w).unwrap();
            assert!(check_gradient(&f, &z, &g, 1e-5).passes(1e-6));
        }
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 6;
        let data: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let rows = [0, 2, 3, 5];
        let z = DenseMatrix::from_vec(n, 2, data.clone()).unwrap();
        let (_, g) = softmax_ce_rows(&z, &labels, &rows, false);
        let f = |v: &[f64]| softmax_ce_rows(&DenseMatrix::from_vec(n, 2, v.to_vec()).unwrap(), &labels, &rows, false).0;
        assert!(check_gradient(&f, &data, &g.data, 1e-5).passes(1e-6));
    }

    #[test]
    fn softmax_ce_agrees_with_ce_loss() {
        let z = DenseMatrix::from_vec(1, 2, vec![0.3, -1.1]).unwrap();
        let p1 = 1.0 / (1.0 + (0.3f64 + 1.1).exp());
        for y in [false, true] {
            let (l, _) = softmax_ce_rows(&z, &[y], &[0], false);
            assert!((l - ce_loss(p1, y)).abs() < 1e-12);
        }
    }
}
