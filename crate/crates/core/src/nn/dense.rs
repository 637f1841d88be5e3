use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VflError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Fully connected layer. Inputs are `B × in`, outputs `B × out`;
/// each row computes `activation(W x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        DenseLayer {
            weight: Tensor::glorot(out_dim, in_dim, rng),
            bias: Tensor::zeros(out_dim, 1),
            activation,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if bias.rows() != weight.rows() || bias.cols() != 1 {
            return Err(VflError::dim(
                "DenseLayer::from_parts",
                format!("({}, 1)", weight.rows()),
                format!("{:?}", bias.shape()),
            ));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(VflError::dim("dense_forward", self.in_dim(), x.cols()));
        }
        let mut out = x.matmul_nt(&self.weight)?;
        out.add_row_broadcast(self.bias.data())?;
        if self.activation != Activation::Identity {
            let act = self.activation;
            out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(out)
    }

    /// Gradients of a scalar loss given `∂L/∂out`. Recomputes the forward pass.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<DenseGrads> {
        let out = self.forward(x)?;
        self.backward_with_output(x, &out, upstream)
    }

    /// Same as [`DenseLayer::backward`] but reuses a cached forward output.
    pub fn backward_with_output(
        &self,
        x: &Tensor,
        out: &Tensor,
        upstream: &Tensor,
    ) -> Result<DenseGrads> {
        if x.cols() != self.in_dim() {
            return Err(VflError::dim("dense_backward", self.in_dim(), x.cols()));
        }
        if upstream.shape() != (x.rows(), self.out_dim()) {
            return Err(VflError::dim(
                "dense_backward",
                format!("({}, {})", x.rows(), self.out_dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        out.same_shape(upstream, "dense_backward")?;

        let delta = if self.activation == Activation::Identity {
            upstream.clone()
        } else {
            let act = self.activation;
            let mut d = upstream.clone();
            d.data_mut()
                .iter_mut()
                .zip(out.data())
                .for_each(|(g, &y)| *g *= act.derivative_from_output(y));
            d
        };

        let weight = delta.matmul_tn(x)?;
        let bias = Tensor::from_vec(self.out_dim(), 1, delta.col_sums())?;
        let input = delta.matmul(&self.weight)?;
        Ok(DenseGrads {
            weight,
            bias,
            input,
        })
    }
}
