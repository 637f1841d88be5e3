//! Dense network kernels with analytic gradients, plus Adam.

mod adam;
mod batchnorm;
mod dense;
mod embedding;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNormLayer, BnCache, BnGrads, BnMode, BN_EPSILON, BN_MOMENTUM};
pub use dense::{Activation, DenseGrads, DenseLayer};
pub use embedding::{EmbeddingTable, SlotEmbedder, DEFAULT_EMBEDDING_DIM};
pub use loss::{one_hot, softmax, softmax_cross_entropy, CrossEntropy};
