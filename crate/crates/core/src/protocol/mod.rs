//! Two-party split learning: party state, boundary messages and training loops.

mod label;
mod message;
mod nonlabel;
mod session;

use serde::{Deserialize, Serialize};

use crate::defense::DefenseConfig;
use crate::error::{Result, VflError};
use crate::nn::{AdamConfig, DEFAULT_EMBEDDING_DIM};

pub use label::{Branch, BranchKind, LabelParty, StepMetric, StepOutput};
pub use message::{decode_message, encode_message, MessageKind, ProtocolMessage, HEADER_LEN};
pub use nonlabel::NonLabelParty;
pub use session::{
    batch_schedule, forward_pass, predict, train_local, train_vanilla, write_metrics, Federation,
    ForwardOutput, LocalModel, PREDICT_BATCH,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Non-label tower widths; the last one is the cut width.
    pub nonlabel_hidden: Vec<usize>,
    /// Label-party bottom widths; the last one is the width of `h_L`.
    pub label_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            nonlabel_hidden: vec![128, 32],
            label_hidden: vec![256, 128],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(VflError::Config("embedding_dim must be > 0".into()));
        }
        if self.nonlabel_hidden.is_empty() || self.label_hidden.is_empty() {
            return Err(VflError::Config("both towers need at least one layer".into()));
        }
        if self.nonlabel_hidden.iter().chain(&self.label_hidden).any(|&w| w == 0) {
            return Err(VflError::Config("layer widths must be > 0".into()));
        }
        Ok(())
    }

    pub fn cut_dim(&self) -> usize {
        *self.nonlabel_hidden.last().unwrap_or(&0)
    }

    pub fn representation_dim(&self) -> usize {
        *self.label_hidden.last().unwrap_or(&0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// Both parties run in the calling thread.
    #[default]
    Sequential,
    /// The non-label party runs in its own thread; parties share only byte frames.
    Threaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Seeds initialization and batch order.
    pub seed: u64,
    pub defense: DefenseConfig,
    pub transport: Transport,
    /// Keep the per-sample trace visible to the non-label party.
    pub record_trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 1,
            adam: AdamConfig::default(),
            seed: 0,
            defense: DefenseConfig::None,
            transport: Transport::Sequential,
            record_trace: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(VflError::Config("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(VflError::Config("epochs must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(VflError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}
