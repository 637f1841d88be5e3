use std::io::Write;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;

use crate::data::{Dataset, VocabSizes};
use crate::error::{Result, VflError};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::tensor::Tensor;

use super::label::{BranchKind, LabelParty, StepMetric};
use super::message::{decode_message, encode_message, ProtocolMessage};
use super::nonlabel::NonLabelParty;
use super::{ModelConfig, TrainConfig, Transport};

/// Inference chunk size; any value gives the same predictions.
pub const PREDICT_BATCH: usize = 4096;

/// Both parties plus the channel between them. Every message is encoded to
/// bytes and decoded on the other side, so the receiver only ever sees what
/// the codec carries.
pub struct Federation {
    pub nonlabel: NonLabelParty,
    pub label: LabelParty,
    pub transport: Transport,
    wire: Option<Vec<Vec<u8>>>,
}

fn tap(wire: &mut Option<Vec<Vec<u8>>>, frame: &[u8]) {
    if let Some(w) = wire {
        w.push(frame.to_vec());
    }
}

impl Federation {
    pub fn new(vocab: &VocabSizes, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut nonlabel = NonLabelParty::new(
            &vocab.nonlabel,
            model,
            cfg.adam,
            derive_seed(cfg.seed, streams::NONLABEL_INIT),
        )?;
        nonlabel.record_trace = cfg.record_trace;
        let mut label = LabelParty::new(
            &vocab.label,
            model,
            cfg.adam,
            derive_seed(cfg.seed, streams::LABEL_INIT),
        )?;
        label.set_defense(cfg.defense.build()?);
        Ok(Federation {
            nonlabel,
            label,
            transport: cfg.transport,
            wire: None,
        })
    }

    /// Each party picks up its own columns of `ds`.
    pub fn load(&mut self, ds: &Dataset) {
        self.nonlabel.load_features(ds);
        self.label.load_samples(ds);
    }

    /// Starts recording every encoded frame that crosses the boundary.
    pub fn tap_wire(&mut self) {
        self.wire.get_or_insert_with(Vec::new);
    }

    pub fn take_wire(&mut self) -> Vec<Vec<u8>> {
        self.wire.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn cross(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage> {
        let bytes = encode_message(msg);
        tap(&mut self.wire, &bytes);
        decode_message(&bytes)
    }

    /// One protocol step: embeddings forward, gradients back, both sides update.
    pub fn train_step(&mut self, ids: &[String]) -> Result<f64> {
        let out = self.nonlabel.send_embeddings(ids)?;
        let received = self.cross(&out)?;
        let (reply, loss) = self.label.on_embedding(&received)?;
        let received = self.cross(&reply)?;
        self.nonlabel.receive_gradient(&received)?;
        Ok(loss)
    }

    /// Runs the batches in order under the configured transport; returns per-step losses.
    pub fn train_batches(&mut self, batches: &[Vec<String>]) -> Result<Vec<f64>> {
        match self.transport {
            Transport::Sequential => batches.iter().map(|ids| self.train_step(ids)).collect(),
            Transport::Threaded => self.train_threaded(batches),
        }
    }

    fn train_threaded(&mut self, batches: &[Vec<String>]) -> Result<Vec<f64>> {
        let (fwd_tx, fwd_rx) = mpsc::channel::<Vec<u8>>();
        let (bwd_tx, bwd_rx) = mpsc::channel::<Vec<u8>>();
        let nonlabel = &mut self.nonlabel;
        let label = &mut self.label;
        let wire = &mut self.wire;
        thread::scope(|s| {
            let worker = s.spawn(move || -> Result<()> {
                for ids in batches {
                    let msg = nonlabel.send_embeddings(ids)?;
                    // a closed channel means the peer failed and reports its own error
                    if fwd_tx.send(encode_message(&msg)).is_err() {
                        return Ok(());
                    }
                    let Ok(bytes) = bwd_rx.recv() else {
                        return Ok(());
                    };
                    nonlabel.receive_gradient(&decode_message(&bytes)?)?;
                }
                Ok(())
            });

            let mut run = || -> Result<Vec<f64>> {
                let mut losses = Vec::with_capacity(batches.len());
                for _ in batches {
                    let bytes = fwd_rx
                        .recv()
                        .map_err(|_| VflError::invalid("non-label party stopped"))?;
                    tap(wire, &bytes);
                    let (reply, loss) = label.on_embedding(&decode_message(&bytes)?)?;
                    let out = encode_message(&reply);
                    tap(wire, &out);
                    bwd_tx
                        .send(out)
                        .map_err(|_| VflError::invalid("non-label party stopped"))?;
                    losses.push(loss);
                }
                Ok(losses)
            };
            let label_result = run();
            drop(bwd_tx);
            drop(fwd_rx);
            let worker_result = worker.join().expect("non-label thread panicked");
            worker_result.and(label_result)
        })
    }

    /// Federated embeddings as received by the label party, in `ids` order.
    pub fn exchange_embeddings(&mut self, ids: &[String]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in ids.chunks(PREDICT_BATCH) {
            let msg = self.nonlabel.send_inference_embeddings(chunk)?;
            let received = self.cross(&msg)?;
            parts.push(self.label.accept_embeddings(&received)?);
        }
        stack_rows(&parts, self.label.cut_dim())
    }
}

pub(crate) fn stack_rows(parts: &[Tensor], cols: usize) -> Result<Tensor> {
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub loss: f64,
    pub per_sample_loss: Vec<f64>,
    /// `B × 2` softmax outputs.
    pub probs: Tensor,
    /// Federated embeddings as decoded by the label party.
    pub h_n: Tensor,
    /// Per-sample cut gradient, before any defense.
    pub cut_grad: Tensor,
}

/// Forward and backward through both parties with batch statistics and no
/// parameter updates. `h_N` still crosses as an encoded message.
pub fn forward_pass(fed: &mut Federation, ids: &[String]) -> Result<ForwardOutput> {
    let msg = fed.nonlabel.send_inference_embeddings(ids)?;
    let received = fed.cross(&msg)?;
    let out = fed.label.evaluate_embedding(&received)?;
    Ok(ForwardOutput {
        loss: out.loss,
        per_sample_loss: out.per_sample_loss,
        probs: out.probs,
        h_n: received.to_tensor(),
        cut_grad: out.cut_grad,
    })
}

/// Positive-class probabilities in inference mode. Only embedding messages cross.
pub fn predict(fed: &mut Federation, ds: &Dataset) -> Result<Vec<f64>> {
    fed.load(ds);
    let ids: Vec<String> = ds.records.iter().map(|r| r.sample_id.clone()).collect();
    let mut probs = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(PREDICT_BATCH) {
        let msg = fed.nonlabel.send_inference_embeddings(chunk)?;
        let received = fed.cross(&msg)?;
        probs.extend(fed.label.on_inference_embedding(&received)?);
    }
    Ok(probs)
}

/// Shuffled mini-batches, reshuffled every epoch. A trailing batch of one
/// sample is dropped because batch normalization needs two.
pub fn batch_schedule(ids: &[String], batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = stream_rng(seed, streams::BATCH_ORDER);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut batches = Vec::new();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            if chunk.len() >= 2 {
                batches.push(chunk.iter().map(|&i| ids[i].clone()).collect());
            }
        }
    }
    batches
}

fn sample_ids(ds: &Dataset) -> Vec<String> {
    ds.records.iter().map(|r| r.sample_id.clone()).collect()
}

/// VanillaVFL: split training on aligned samples only.
pub fn train_vanilla(
    aligned: &Dataset,
    vocab: &VocabSizes,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Federation> {
    if aligned.is_empty() {
        return Err(VflError::invalid("no aligned samples to train on"));
    }
    if let Some(r) = aligned.records.iter().find(|r| r.nonlabel_features.is_none()) {
        return Err(VflError::invalid(format!(
            "sample {} has no non-label features",
            r.sample_id
        )));
    }
    let mut fed = Federation::new(vocab, model, cfg)?;
    fed.load(aligned);
    let batches = batch_schedule(&sample_ids(aligned), cfg.batch_size, cfg.epochs, cfg.seed);
    fed.train_batches(&batches)?;
    Ok(fed)
}

/// Label-party-only model: the federated architecture with `h_N` fixed at zero.
pub struct LocalModel {
    pub label: LabelParty,
}

impl LocalModel {
    pub fn new(vocab: &VocabSizes, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LocalModel {
            label: LabelParty::new(
                &vocab.label,
                model,
                cfg.adam,
                derive_seed(cfg.seed, streams::LABEL_INIT),
            )?,
        })
    }

    pub fn train_step(&mut self, ids: &[String]) -> Result<f64> {
        let zeros = Tensor::zeros(ids.len(), self.label.cut_dim());
        Ok(self.label.train_step(BranchKind::Federated, ids, &zeros, true)?.loss)
    }

    pub fn predict(&mut self, ds: &Dataset) -> Result<Vec<f64>> {
        self.label.load_samples(ds);
        let ids = sample_ids(ds);
        let mut probs = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(PREDICT_BATCH) {
            let zeros = Tensor::zeros(chunk.len(), self.label.cut_dim());
            probs.extend(self.label.infer(BranchKind::Federated, chunk, &zeros)?);
        }
        Ok(probs)
    }
}

/// Local baseline trained on `ds` (non-label columns are ignored).
pub fn train_local(
    ds: &Dataset,
    vocab: &VocabSizes,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<LocalModel> {
    if ds.is_empty() {
        return Err(VflError::invalid("no samples to train on"));
    }
    let mut local = LocalModel::new(vocab, model, cfg)?;
    local.label.load_samples(ds);
    for ids in batch_schedule(&sample_ids(ds), cfg.batch_size, cfg.epochs, cfg.seed) {
        local.train_step(&ids)?;
    }
    Ok(local)
}

/// Per-step metrics as JSON lines.
pub fn write_metrics<W: Write>(metrics: &[StepMetric], mut w: W) -> Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
