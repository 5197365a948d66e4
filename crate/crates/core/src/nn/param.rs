use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub step: u64,
}

impl Parameter {
    pub fn new(value: DenseMatrix) -> Self {
        let (r, c) = value.shape();
        Parameter {
            value,
            grad: DenseMatrix::zeros(r, c),
            m: DenseMatrix::zeros(r, c),
            v: DenseMatrix::zeros(r, c),
            step: 0,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(DenseMatrix::zeros(rows, cols))
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` with `fan_in = rows`,
    /// `fan_out = cols`.
    pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(DenseMatrix {
            rows,
            cols,
            data,
        })
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

/// Optimizer and schedule settings shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            epochs: 150,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("beta1 and beta2 must be below 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One Adam update with bias correction. Weight decay is coupled: `wd·w` is
/// added to the gradient before the moments are updated.
pub fn adam_step(params: &mut [&mut Parameter], hyper: &TrainHyper) {
    for p in params.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        let n = p.value.data.len();
        for i in 0..n {
            let g = p.grad.data[i] + hyper.weight_decay * p.value.data[i];
            let m = hyper.beta1 * p.m.data[i] + (1.0 - hyper.beta1) * g;
            let v = hyper.beta2 * p.v.data[i] + (1.0 - hyper.beta2) * g * g;
            p.m.data[i] = m;
            p.v.data[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            p.value.data[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}
