use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, N_LABEL_SLOTS};
use crate::defense::{GradientDefense, NoDefense};
use crate::error::{Result, VflError};
use crate::nn::{
    one_hot, softmax_cross_entropy, Activation, AdamConfig, AdamState, BatchNormLayer, BnCache,
    DenseLayer, SlotEmbedder,
};
use crate::tensor::Tensor;

use super::message::{MessageKind, ProtocolMessage};
use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Federated,
    Local,
}

/// Branch-private state: one batch norm per bottom layer and the top layer
/// mapping `[h_N; h_L]` to two logits.
#[derive(Clone, Debug)]
pub struct Branch {
    pub norms: Vec<BatchNormLayer>,
    pub top: DenseLayer,
    opt: AdamState,
}

impl Branch {
    fn new(hidden: &[usize], top_in: usize, adam: AdamConfig, rng: &mut ChaCha8Rng) -> Self {
        let norms = hidden.iter().map(|&h| BatchNormLayer::new(h)).collect();
        let top = DenseLayer::new(top_in, 2, Activation::Identity, rng);
        let mut b = Branch {
            norms,
            top,
            opt: AdamState::new(adam, &[]),
        };
        b.opt = AdamState::for_params(adam, &b.params());
        b
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for n in &self.norms {
            p.push(&n.gamma);
            p.push(&n.beta);
        }
        p.push(&self.top.weight);
        p.push(&self.top.bias);
        p
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    fn with_fresh_optimizer(&self) -> Branch {
        let mut b = self.clone();
        b.opt = AdamState::for_params(self.opt.config, &b.params());
        b
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepMetric {
    pub step: u64,
    pub branch: BranchKind,
    pub loss: f64,
}

/// Result of one label-party forward/backward.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub per_sample_loss: Vec<f64>,
    /// `B × 2` softmax outputs.
    pub probs: Tensor,
    /// `∂l_i/∂h_N,i · (ŷ_i − y_i)`: per-sample gradient w.r.t. the cut input.
    pub cut_grad: Tensor,
}

struct Tape {
    flat: Vec<usize>,
    /// Input of each bottom dense layer; the last entry is `h_L`.
    inputs: Vec<Tensor>,
    pre_norm: Vec<Tensor>,
    caches: Vec<BnCache>,
    top_in: Tensor,
    logits: Tensor,
}

/// The advertising-platform side: labels, label-party features, the shared
/// embedding table and bottom network, and the branch-specific heads.
pub struct LabelParty {
    pub embed: SlotEmbedder,
    /// Linear bottom layers; batch norm and ReLU follow each, per branch.
    pub bottom: Vec<DenseLayer>,
    shared_opt: AdamState,
    pub federated: Branch,
    pub local: Option<Branch>,
    samples: HashMap<String, ([u32; N_LABEL_SLOTS], u8)>,
    defense: Box<dyn GradientDefense>,
    cut_dim: usize,
    seq_out: u64,
    last_seq_in: Option<u64>,
    steps: u64,
    pub metrics: Vec<StepMetric>,
    /// Skips updates of the shared embedding table and bottom layers.
    pub freeze_shared: bool,
}

impl LabelParty {
    pub fn new(vocab: &[usize], model: &ModelConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        if vocab.len() != N_LABEL_SLOTS {
            return Err(VflError::dim("LabelParty::new", N_LABEL_SLOTS, vocab.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = SlotEmbedder::new(vocab, model.embedding_dim, &mut rng);
        let mut bottom = Vec::new();
        let mut width = embed.output_dim();
        for &h in &model.label_hidden {
            bottom.push(DenseLayer::new(width, h, Activation::Identity, &mut rng));
            width = h;
        }
        let cut_dim = model.cut_dim();
        let federated = Branch::new(&model.label_hidden, cut_dim + width, adam, &mut rng);
        let mut party = LabelParty {
            embed,
            bottom,
            shared_opt: AdamState::new(adam, &[]),
            federated,
            local: None,
            samples: HashMap::new(),
            defense: Box::new(NoDefense),
            cut_dim,
            seq_out: 0,
            last_seq_in: None,
            steps: 0,
            metrics: Vec::new(),
            freeze_shared: false,
        };
        party.shared_opt = AdamState::for_params(adam, &party.shared_params());
        Ok(party)
    }

    pub fn cut_dim(&self) -> usize {
        self.cut_dim
    }

    pub fn representation_dim(&self) -> usize {
        self.bottom.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn set_defense(&mut self, defense: Box<dyn GradientDefense>) {
        self.defense = defense;
    }

    /// Registers label features and labels for every record.
    pub fn load_samples(&mut self, ds: &Dataset) {
        for r in &ds.records {
            self.samples
                .insert(r.sample_id.clone(), (r.label_features, r.label));
        }
    }

    pub fn label_of(&self, id: &str) -> Option<u8> {
        self.samples.get(id).map(|s| s.1)
    }

    /// Adds the auxiliary local branch. It starts as a copy of the federated
    /// head unless `fresh_seed` asks for a new random initialization.
    pub fn enable_local_branch(&mut self, fresh_seed: Option<u64>) {
        let branch = match fresh_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let hidden: Vec<usize> = self.bottom.iter().map(DenseLayer::out_dim).collect();
                Branch::new(
                    &hidden,
                    self.cut_dim + self.representation_dim(),
                    self.federated.opt.config,
                    &mut rng,
                )
            }
            None => self.federated.with_fresh_optimizer(),
        };
        self.local = Some(branch);
    }

    /// Discards the local branch; inference only ever uses the federated one.
    pub fn drop_local_branch(&mut self) -> Option<Branch> {
        self.local.take()
    }

    /// Embedding table and bottom weights. Bottom biases stay at zero: batch
    /// norm follows every bottom layer, so their gradient vanishes identically.
    pub fn shared_params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.embed.table.rows];
        p.extend(self.bottom.iter().map(|l| &l.weight));
        p
    }

    pub fn shared_optimizer(&self) -> &AdamState {
        &self.shared_opt
    }

    pub fn branch(&self, kind: BranchKind) -> Option<&Branch> {
        match kind {
            BranchKind::Federated => Some(&self.federated),
            BranchKind::Local => self.local.as_ref(),
        }
    }

    fn lookup(&self, ids: &[String]) -> Result<(Vec<usize>, Vec<u8>)> {
        let mut rows = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let (f, y) = self
                .samples
                .get(id)
                .ok_or_else(|| VflError::invalid(format!("unknown sample {id}")))?;
            rows.push(&f[..]);
            labels.push(*y);
        }
        Ok((self.embed.flat_indices(&rows)?, labels))
    }

    fn check_cut_input(&self, ids: &[String], h_n: &Tensor) -> Result<()> {
        if h_n.shape() != (ids.len(), self.cut_dim) {
            return Err(VflError::dim(
                "label party cut input",
                format!("({}, {})", ids.len(), self.cut_dim),
                format!("{:?}", h_n.shape()),
            ));
        }
        Ok(())
    }

    /// Forward, loss and backward on one branch. With `update` the shared and
    /// branch parameters take an Adam step; without it the call has no side
    /// effects (batch-norm running statistics are restored).
    pub fn train_step(
        &mut self,
        kind: BranchKind,
        ids: &[String],
        h_n: &Tensor,
        update: bool,
    ) -> Result<StepOutput> {
        self.check_cut_input(ids, h_n)?;
        let (flat, labels) = self.lookup(ids)?;
        let branch = match kind {
            BranchKind::Federated => &mut self.federated,
            BranchKind::Local => self
                .local
                .as_mut()
                .ok_or_else(|| VflError::invalid("local branch not enabled"))?,
        };
        let saved_norms = (!update).then(|| branch.norms.clone());
        let tape = forward_train(&self.embed, &self.bottom, branch, flat, h_n)?;
        if let Some(norms) = saved_norms {
            branch.norms = norms;
        }

        let ce = softmax_cross_entropy(&tape.logits, &one_hot(&labels))?;
        if !ce.loss.is_finite() {
            return Err(VflError::Numeric("non-finite loss".into()));
        }

        // top layer
        let top_g = branch
            .top
            .backward_with_output(&tape.top_in, &tape.logits, &ce.grad_logits)?;
        let (d_hn, mut upstream) = top_g.input.split_cols(self.cut_dim)?;

        // bottom: ReLU ∘ BN ∘ Dense, per layer, in reverse
        let mut bottom_grads = Vec::with_capacity(self.bottom.len());
        let mut norm_grads = Vec::with_capacity(self.bottom.len());
        for k in (0..self.bottom.len()).rev() {
            let act = &tape.inputs[k + 1];
            upstream
                .data_mut()
                .iter_mut()
                .zip(act.data())
                .for_each(|(g, &a)| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            let bn_g = branch.norms[k].backward(&tape.caches[k], &upstream)?;
            let dense_g =
                self.bottom[k].backward_with_output(&tape.inputs[k], &tape.pre_norm[k], &bn_g.input)?;
            norm_grads.push((bn_g.gamma, bn_g.beta));
            bottom_grads.push(dense_g.weight);
            upstream = dense_g.input;
        }
        let emb_grad = self.embed.backward(&tape.flat, &upstream)?;

        let b = ids.len() as f64;
        let mut cut_grad = d_hn;
        cut_grad.scale_in_place(b);

        if update {
            let mut shared: Vec<Tensor> = vec![emb_grad];
            shared.extend(bottom_grads.into_iter().rev());
            let mut head: Vec<Tensor> = Vec::new();
            for (g, bt) in norm_grads.into_iter().rev() {
                head.push(g);
                head.push(bt);
            }
            head.push(top_g.weight);
            head.push(top_g.bias);

            if !self.freeze_shared {
                self.shared_opt.update(
                    &mut shared_params_mut(&mut self.embed, &mut self.bottom),
                    &shared.iter().collect::<Vec<_>>(),
                )?;
            }
            let Branch { norms, top, opt } = branch;
            let mut head_params: Vec<&mut Tensor> = Vec::new();
            for n in norms.iter_mut() {
                head_params.push(&mut n.gamma);
                head_params.push(&mut n.beta);
            }
            head_params.push(&mut top.weight);
            head_params.push(&mut top.bias);
            opt.update(&mut head_params, &head.iter().collect::<Vec<_>>())?;

            self.steps += 1;
            self.metrics.push(StepMetric {
                step: self.steps,
                branch: kind,
                loss: ce.loss,
            });
        }

        Ok(StepOutput {
            loss: ce.loss,
            per_sample_loss: ce.per_sample,
            probs: ce.probs,
            cut_grad,
        })
    }

    /// Inference-mode positive-class probabilities.
    pub fn infer(&self, kind: BranchKind, ids: &[String], h_n: &Tensor) -> Result<Vec<f64>> {
        self.check_cut_input(ids, h_n)?;
        let (flat, _) = self.lookup(ids)?;
        let branch = self
            .branch(kind)
            .ok_or_else(|| VflError::invalid("branch not enabled"))?;
        let h_l = self.representations_with(branch, &flat)?;
        let top_in = Tensor::concat_cols(h_n, &h_l)?;
        let logits = branch.top.forward(&top_in)?;
        Ok(logits
            .iter_rows()
            .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
            .collect())
    }

    fn representations_with(&self, branch: &Branch, flat: &[usize]) -> Result<Tensor> {
        let mut x = self.embed.forward(flat)?;
        for (layer, norm) in self.bottom.iter().zip(&branch.norms) {
            let z = layer.forward(&x)?;
            x = norm.forward_infer(&z)?.map(|v| v.max(0.0));
        }
        Ok(x)
    }

    /// Inference-mode label-party representations `h_L` under the federated branch.
    pub fn representations(&self, ids: &[String]) -> Result<Tensor> {
        let (flat, _) = self.lookup(ids)?;
        self.representations_with(&self.federated, &flat)
    }

    fn check_incoming(&mut self, msg: &ProtocolMessage) -> Result<()> {
        if msg.kind != MessageKind::FederatedEmbeddingBatch {
            return Err(VflError::invalid("expected a federated-embedding batch"));
        }
        if self.last_seq_in.is_some_and(|s| msg.seq <= s) {
            return Err(VflError::invalid(format!("non-increasing seq {}", msg.seq)));
        }
        if msg.dim != self.cut_dim {
            return Err(VflError::dim("federated embedding", self.cut_dim, msg.dim));
        }
        self.last_seq_in = Some(msg.seq);
        Ok(())
    }

    /// Training step on the federated branch. Returns the (defended) gradient
    /// batch together with the batch loss.
    pub fn on_embedding(&mut self, msg: &ProtocolMessage) -> Result<(ProtocolMessage, f64)> {
        self.check_incoming(msg)?;
        let out = self.train_step(BranchKind::Federated, &msg.batch_ids, &msg.to_tensor(), true)?;
        let sent = self.defense.perturb(&out.cut_grad)?;
        if sent.shape() != out.cut_grad.shape() {
            return Err(VflError::dim(
                "defense output",
                format!("{:?}", out.cut_grad.shape()),
                format!("{:?}", sent.shape()),
            ));
        }
        self.seq_out += 1;
        let reply = ProtocolMessage::from_tensor(
            MessageKind::CutGradientBatch,
            self.seq_out,
            msg.batch_ids.clone(),
            &sent,
        )?;
        Ok((reply, out.loss))
    }

    /// Forward and backward with batch statistics but no parameter or state
    /// change; the cut gradient stays on this side.
    pub fn evaluate_embedding(&mut self, msg: &ProtocolMessage) -> Result<StepOutput> {
        self.check_incoming(msg)?;
        self.train_step(BranchKind::Federated, &msg.batch_ids, &msg.to_tensor(), false)
    }

    /// Receives federated embeddings for storage (e.g. as generative-model
    /// training data) without computing anything.
    pub fn accept_embeddings(&mut self, msg: &ProtocolMessage) -> Result<Tensor> {
        self.check_incoming(msg)?;
        Ok(msg.to_tensor())
    }

    /// Federated prediction for an inference embedding batch.
    pub fn on_inference_embedding(&mut self, msg: &ProtocolMessage) -> Result<Vec<f64>> {
        self.check_incoming(msg)?;
        self.infer(BranchKind::Federated, &msg.batch_ids, &msg.to_tensor())
    }
}

fn shared_params_mut<'a>(
    embed: &'a mut SlotEmbedder,
    bottom: &'a mut [DenseLayer],
) -> Vec<&'a mut Tensor> {
    let mut p = vec![&mut embed.table.rows];
    p.extend(bottom.iter_mut().map(|l| &mut l.weight));
    p
}

fn forward_train(
    embed: &SlotEmbedder,
    bottom: &[DenseLayer],
    branch: &mut Branch,
    flat: Vec<usize>,
    h_n: &Tensor,
) -> Result<Tape> {
    let mut inputs = vec![embed.forward(&flat)?];
    let mut pre_norm = Vec::with_capacity(bottom.len());
    let mut caches = Vec::with_capacity(bottom.len());
    for (layer, norm) in bottom.iter().zip(branch.norms.iter_mut()) {
        let z = layer.forward(inputs.last().expect("non-empty"))?;
        let (n, cache) = norm.forward_train(&z)?;
        inputs.push(n.map(|v| v.max(0.0)));
        pre_norm.push(z);
        caches.push(cache);
    }
    let top_in = Tensor::concat_cols(h_n, inputs.last().expect("non-empty"))?;
    let logits = branch.top.forward(&top_in)?;
    Ok(Tape {
        flat,
        inputs,
        pre_norm,
        caches,
        top_in,
        logits,
    })
}
