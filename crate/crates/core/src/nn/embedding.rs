use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VflError};
use crate::tensor::Tensor;

pub const DEFAULT_EMBEDDING_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Tensor,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            rows: Tensor::glorot(vocab_size, dim, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    fn check(&self, indices: &[usize]) -> Result<()> {
        match indices.iter().find(|&&i| i >= self.vocab_size()) {
            Some(&index) => Err(VflError::Index {
                index,
                size: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    /// Gathers one row per index.
    pub fn forward(&self, indices: &[usize]) -> Result<Tensor> {
        self.check(indices)?;
        Ok(self.rows.select_rows(indices))
    }

    /// Scatter-adds `upstream` rows into a table-shaped gradient.
    pub fn backward(&self, indices: &[usize], upstream: &Tensor) -> Result<Tensor> {
        self.check(indices)?;
        if upstream.shape() != (indices.len(), self.dim()) {
            return Err(VflError::dim(
                "embedding_backward",
                format!("({}, {})", indices.len(), self.dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grad = Tensor::zeros(self.vocab_size(), self.dim());
        for (n, &i) in indices.iter().enumerate() {
            grad.row_mut(i)
                .iter_mut()
                .zip(upstream.row(n))
                .for_each(|(g, u)| *g += u);
        }
        Ok(grad)
    }
}

/// One embedding table holding several categorical slots at fixed row offsets.
/// A sample's input is the concatenation of its per-slot embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotEmbedder {
    pub table: EmbeddingTable,
    offsets: Vec<usize>,
    vocab_sizes: Vec<usize>,
}

impl SlotEmbedder {
    pub fn new<R: Rng + ?Sized>(vocab_sizes: &[usize], dim: usize, rng: &mut R) -> Self {
        let mut offsets = Vec::with_capacity(vocab_sizes.len());
        let mut total = 0;
        for &v in vocab_sizes {
            offsets.push(total);
            total += v;
        }
        SlotEmbedder {
            table: EmbeddingTable::new(total, dim, rng),
            offsets,
            vocab_sizes: vocab_sizes.to_vec(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.offsets.len()
    }

    pub fn output_dim(&self) -> usize {
        self.n_slots() * self.table.dim()
    }

    /// Flattened table rows for a batch: `ids[n]` holds one ID per slot.
    pub fn flat_indices(&self, ids: &[&[u32]]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ids.len() * self.n_slots());
        for sample in ids {
            if sample.len() != self.n_slots() {
                return Err(VflError::dim("SlotEmbedder", self.n_slots(), sample.len()));
            }
            for (s, &id) in sample.iter().enumerate() {
                let id = id as usize;
                if id >= self.vocab_sizes[s] {
                    return Err(VflError::Index {
                        index: id,
                        size: self.vocab_sizes[s],
                    });
                }
                out.push(self.offsets[s] + id);
            }
        }
        Ok(out)
    }

    /// `B × (slots·dim)` input for the first dense layer.
    pub fn forward(&self, flat: &[usize]) -> Result<Tensor> {
        let gathered = self.table.forward(flat)?;
        let b = flat.len() / self.n_slots().max(1);
        Tensor::from_vec(b, self.output_dim(), gathered.into_vec())
    }

    pub fn backward(&self, flat: &[usize], upstream: &Tensor) -> Result<Tensor> {
        let per_lookup = Tensor::from_vec(flat.len(), self.table.dim(), upstream.data().to_vec())?;
        self.table.backward(flat, &per_lookup)
    }
}
