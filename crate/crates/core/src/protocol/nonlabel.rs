use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::AttackTrace;
use crate::data::{Dataset, N_NONLABEL_SLOTS};
use crate::error::{Result, VflError};
use crate::nn::{Activation, AdamConfig, AdamState, DenseLayer, SlotEmbedder};
use crate::tensor::Tensor;

use super::message::{MessageKind, ProtocolMessage};
use super::ModelConfig;

struct PendingBatch {
    ids: Vec<String>,
    flat: Vec<usize>,
    /// Input to every layer followed by the final output.
    activations: Vec<Tensor>,
}

/// The publisher side. Holds its own features only, produces federated
/// embeddings and consumes whatever gradient batch it is sent.
pub struct NonLabelParty {
    pub embed: SlotEmbedder,
    pub layers: Vec<DenseLayer>,
    opt: AdamState,
    features: HashMap<String, [u32; N_NONLABEL_SLOTS]>,
    seq_out: u64,
    last_seq_in: Option<u64>,
    pending: Option<PendingBatch>,
    pub trace: AttackTrace,
    pub record_trace: bool,
}

impl NonLabelParty {
    pub fn new(vocab: &[usize], model: &ModelConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        if vocab.len() != N_NONLABEL_SLOTS {
            return Err(VflError::dim("NonLabelParty::new", N_NONLABEL_SLOTS, vocab.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = SlotEmbedder::new(vocab, model.embedding_dim, &mut rng);
        let mut layers = Vec::new();
        let mut width = embed.output_dim();
        for (k, &h) in model.nonlabel_hidden.iter().enumerate() {
            let act = if k + 1 == model.nonlabel_hidden.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::new(width, h, act, &mut rng));
            width = h;
        }
        let mut party = NonLabelParty {
            embed,
            layers,
            opt: AdamState::new(adam, &[]),
            features: HashMap::new(),
            seq_out: 0,
            last_seq_in: None,
            pending: None,
            trace: AttackTrace::new(),
            record_trace: false,
        };
        party.opt = AdamState::for_params(adam, &party.params());
        Ok(party)
    }

    pub fn cut_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    /// Registers the non-label features of every featured record.
    pub fn load_features(&mut self, ds: &Dataset) {
        for r in &ds.records {
            if let Some(f) = r.nonlabel_features {
                self.features.insert(r.sample_id.clone(), f);
            }
        }
    }

    pub fn knows(&self, id: &str) -> bool {
        self.features.contains_key(id)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.embed.table.rows];
        for l in &self.layers {
            p.push(&l.weight);
            p.push(&l.bias);
        }
        p
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    fn flat_indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        let rows: Vec<&[u32]> = ids
            .iter()
            .map(|id| {
                self.features.get(id).map(|f| &f[..]).ok_or_else(|| {
                    VflError::invalid(format!("sample {id} has no non-label features (unaligned?)"))
                })
            })
            .collect::<Result<_>>()?;
        self.embed.flat_indices(&rows)
    }

    fn forward(&self, ids: &[String]) -> Result<(Vec<usize>, Vec<Tensor>)> {
        let flat = self.flat_indices(ids)?;
        let mut acts = vec![self.embed.forward(&flat)?];
        for l in &self.layers {
            let next = l.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok((flat, acts))
    }

    /// Federated embeddings `h_N` for `ids` without touching protocol state.
    pub fn embeddings(&self, ids: &[String]) -> Result<Tensor> {
        let (_, mut acts) = self.forward(ids)?;
        Ok(acts.pop().expect("non-empty"))
    }

    fn next_message(&mut self, ids: &[String], h: &Tensor) -> Result<ProtocolMessage> {
        self.seq_out += 1;
        let msg = ProtocolMessage::from_tensor(
            MessageKind::FederatedEmbeddingBatch,
            self.seq_out,
            ids.to_vec(),
            h,
        )?;
        if self.record_trace {
            self.trace.observe(&msg);
        }
        Ok(msg)
    }

    /// Training forward: emits the embedding batch and waits for its gradient.
    pub fn send_embeddings(&mut self, ids: &[String]) -> Result<ProtocolMessage> {
        if self.pending.is_some() {
            return Err(VflError::invalid("previous batch still awaiting its gradient"));
        }
        let (flat, activations) = self.forward(ids)?;
        let msg = self.next_message(ids, activations.last().expect("non-empty"))?;
        self.pending = Some(PendingBatch {
            ids: ids.to_vec(),
            flat,
            activations,
        });
        Ok(msg)
    }

    /// Inference forward: no gradient will follow.
    pub fn send_inference_embeddings(&mut self, ids: &[String]) -> Result<ProtocolMessage> {
        let h = self.embeddings(ids)?;
        self.next_message(ids, &h)
    }

    /// Backpropagates a received cut-gradient batch and takes one Adam step.
    /// Rows are per-sample gradients; the party averages over the batch.
    pub fn receive_gradient(&mut self, msg: &ProtocolMessage) -> Result<()> {
        if msg.kind != MessageKind::CutGradientBatch {
            return Err(VflError::invalid("expected a cut-gradient batch"));
        }
        if self.last_seq_in.is_some_and(|s| msg.seq <= s) {
            return Err(VflError::invalid(format!("non-increasing seq {}", msg.seq)));
        }
        let pending = self
            .pending
            .take()
            .ok_or_else(|| VflError::invalid("gradient received with no batch in flight"))?;
        if msg.batch_ids != pending.ids || msg.dim != self.cut_dim() {
            self.pending = Some(pending);
            return Err(VflError::invalid("gradient batch does not match the batch in flight"));
        }
        self.last_seq_in = Some(msg.seq);
        if self.record_trace {
            self.trace.observe(msg);
        }

        let b = msg.batch_size() as f64;
        let mut upstream = msg.to_tensor();
        upstream.scale_in_place(1.0 / b);
        let mut grads = Vec::with_capacity(2 * self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let g = layer.backward_with_output(
                &pending.activations[k],
                &pending.activations[k + 1],
                &upstream,
            )?;
            grads.push((g.weight, g.bias));
            upstream = g.input;
        }
        let emb_grad = self.embed.backward(&pending.flat, &upstream)?;

        let mut ordered: Vec<Tensor> = vec![emb_grad];
        for (w, bias) in grads.into_iter().rev() {
            ordered.push(w);
            ordered.push(bias);
        }
        let grad_refs: Vec<&Tensor> = ordered.iter().collect();
        self.opt
            .update(&mut params_mut(&mut self.embed, &mut self.layers), &grad_refs)
    }
}

fn params_mut<'a>(embed: &'a mut SlotEmbedder, layers: &'a mut [DenseLayer]) -> Vec<&'a mut Tensor> {
    let mut p = vec![&mut embed.table.rows];
    for l in layers {
        p.push(&mut l.weight);
        p.push(&mut l.bias);
    }
    p
}
