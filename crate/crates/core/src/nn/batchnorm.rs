use serde::{Deserialize, Serialize};

use crate::error::{Result, VflError};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-feature batch normalization over the rows of a `B × d` batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

/// Saved activations from a train-mode forward.
#[derive(Clone, Debug)]
pub struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub input: Tensor,
}

impl BatchNormLayer {
    pub fn new(dim: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(dim, 1, 1.0),
            beta: Tensor::zeros(dim, 1),
            running_mean: Tensor::zeros(dim, 1),
            running_var: Tensor::filled(dim, 1, 1.0),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            mode: BnMode::Train,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.rows()
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(VflError::dim("batchnorm_forward", self.dim(), x.cols()));
        }
        Ok(())
    }

    /// Dispatches on `self.mode`. Train mode returns the cache needed by
    /// [`BatchNormLayer::backward`] and updates the running statistics.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Option<BnCache>)> {
        match self.mode {
            BnMode::Train => self.forward_train(x).map(|(y, c)| (y, Some(c))),
            BnMode::Infer => self.forward_infer(x).map(|y| (y, None)),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        self.check_width(x)?;
        let b = x.rows();
        if b < 2 {
            return Err(VflError::invalid(
                "batch norm in train mode needs at least 2 samples",
            ));
        }
        let d = self.dim();
        let mean = x.col_means();
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();

        let mut normalized = x.clone();
        let mut out = Tensor::zeros(b, d);
        for i in 0..b {
            let nrow = normalized.row_mut(i);
            for j in 0..d {
                nrow[j] = (nrow[j] - mean[j]) * inv_std[j];
            }
            let orow = out.row_mut(i);
            for j in 0..d {
                orow[j] = self.gamma.data()[j] * nrow[j] + self.beta.data()[j];
            }
        }

        let m = self.momentum;
        for j in 0..d {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = m * *rm + (1.0 - m) * mean[j];
            let rv = &mut self.running_var.data_mut()[j];
            *rv = m * *rv + (1.0 - m) * var[j];
        }
        Ok((out, BnCache { normalized, inv_std }))
    }

    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let d = self.dim();
        let scale: Vec<f64> = (0..d)
            .map(|j| self.gamma.data()[j] / (self.running_var.data()[j] + self.epsilon).sqrt())
            .collect();
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            for j in 0..d {
                row[j] = (row[j] - self.running_mean.data()[j]) * scale[j] + self.beta.data()[j];
            }
        }
        Ok(out)
    }

    pub fn backward(&self, cache: &BnCache, upstream: &Tensor) -> Result<BnGrads> {
        cache.normalized.same_shape(upstream, "batchnorm_backward")?;
        let b = upstream.rows() as f64;
        let d = self.dim();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for (up, xh) in upstream.iter_rows().zip(cache.normalized.iter_rows()) {
            for j in 0..d {
                dbeta[j] += up[j];
                dgamma[j] += up[j] * xh[j];
            }
        }
        // dx = γ·inv_std/B · (B·dy − Σdy − x̂·Σ(dy·x̂))
        let mut input = Tensor::zeros(upstream.rows(), d);
        for i in 0..upstream.rows() {
            let up = upstream.row(i);
            let xh = cache.normalized.row(i);
            let row = input.row_mut(i);
            for j in 0..d {
                let k = self.gamma.data()[j] * cache.inv_std[j] / b;
                row[j] = k * (b * up[j] - dbeta[j] - xh[j] * dgamma[j]);
            }
        }
        Ok(BnGrads {
            gamma: Tensor::from_vec(d, 1, dgamma)?,
            beta: Tensor::from_vec(d, 1, dbeta)?,
            input,
        })
    }
}
