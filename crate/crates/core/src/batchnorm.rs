//! 1-D batch normalization over feature columns, with the exact backward
//! pass through the batch statistics.
//!
//! The shift parameter `beta` is kept frozen at zero (the neck convention);
//! only `gamma` is trainable. Running statistics are exponential moving
//! averages updated in training mode only, using the biased batch variance.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    /// Frozen at zero; serialized for completeness.
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Intermediates needed by [`BatchNorm::backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize, epsilon: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            epsilon,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "batch norm over {} features got {} columns",
                self.dim(),
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::data("batch norm on an empty batch"));
        }
        Ok(())
    }

    /// Normalize with batch statistics and update the running averages.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, BatchNormCache)> {
        self.check_input(x)?;
        let n = x.nrows();
        let dim = self.dim();
        let inv_n = 1.0 / n as f64;
        let mut mean: Array1<f64> = Array1::zeros(dim);
        for row in x.rows() {
            for c in 0..dim {
                mean[c] += row[c];
            }
        }
        mean.mapv_inplace(|v| v * inv_n);
        let mut var: Array1<f64> = Array1::zeros(dim);
        for row in x.rows() {
            for c in 0..dim {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        var.mapv_inplace(|v| v * inv_n);
        let mut inv_std: Array1<f64> = Array1::zeros(dim);
        for c in 0..dim {
            inv_std[c] = 1.0 / (var[c] + self.epsilon).sqrt();
        }
        let mut xhat = Array2::zeros((n, dim));
        let mut y = Array2::zeros((n, dim));
        for i in 0..n {
            for c in 0..dim {
                let h = (x[(i, c)] - mean[c]) * inv_std[c];
                xhat[(i, c)] = h;
                y[(i, c)] = self.gamma[c] * h + self.beta[c];
            }
        }
        for c in 0..dim {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
        }
        Ok((y, BatchNormCache { xhat, inv_std }))
    }

    /// Normalize with the stored running statistics; read-only.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let dim = self.dim();
        let mut y = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for c in 0..dim {
                let inv_std = 1.0 / (self.running_var[c] + self.epsilon).sqrt();
                y[(i, c)] = self.gamma[c] * (x[(i, c)] - self.running_mean[c]) * inv_std
                    + self.beta[c];
            }
        }
        Ok(y)
    }

    /// Backward through a training-mode forward.
    ///
    /// Returns the gradient on the input and on `gamma`. Uses the closed form
    /// for biased-variance batch norm:
    /// `dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        dy: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let n = cache.xhat.nrows();
        let dim = self.dim();
        if dy.raw_dim() != cache.xhat.raw_dim() {
            return Err(Error::shape(format!(
                "upstream gradient shape {:?} does not match cached batch {:?}",
                dy.shape(),
                cache.xhat.shape()
            )));
        }
        let mut dgamma: Array1<f64> = Array1::zeros(dim);
        let mut sum_dxhat: Array1<f64> = Array1::zeros(dim);
        let mut sum_dxhat_xhat: Array1<f64> = Array1::zeros(dim);
        for i in 0..n {
            for c in 0..dim {
                let dxhat = dy[(i, c)] * self.gamma[c];
                dgamma[c] += dy[(i, c)] * cache.xhat[(i, c)];
                sum_dxhat[c] += dxhat;
                sum_dxhat_xhat[c] += dxhat * cache.xhat[(i, c)];
            }
        }
        let inv_n = 1.0 / n as f64;
        let mut dx = Array2::zeros((n, dim));
        for i in 0..n {
            for c in 0..dim {
                let dxhat = dy[(i, c)] * self.gamma[c];
                dx[(i, c)] = cache.inv_std[c]
                    * inv_n
                    * (n as f64 * dxhat
                        - sum_dxhat[c]
                        - cache.xhat[(i, c)] * sum_dxhat_xhat[c]);
            }
        }
        Ok((dx, dgamma))
    }
}
