//! Diffu-AT: pretrain a split model, synthesize federated embeddings for
//! label-only samples, then alternate between federated steps on aligned
//! batches and local-branch steps on synthesized ones.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{BinReader, BinWriter};
use crate::data::{Dataset, VocabSizes};
use crate::error::{Result, VflError};
use crate::genmodel::{
    heuristic_embedding, sample_embeddings, train_diffusion, Denoiser, DiffusionConfig, DiffusionData,
    EmbeddingCache,
};
use crate::protocol::{
    batch_schedule, train_vanilla, BranchKind, Federation, ModelConfig, TrainConfig,
};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::tensor::Tensor;

/// Probability of drawing an aligned mini-batch: `|A| / (|A| + |Ũ|)`.
pub fn aligned_probability(n_aligned: usize, n_unaligned: usize) -> Result<f64> {
    if n_aligned == 0 {
        return Err(VflError::invalid("no aligned samples"));
    }
    Ok(n_aligned as f64 / (n_aligned + n_unaligned) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub p: f64,
    /// Hard cap on iterations; otherwise training stops when the aligned
    /// stream has delivered `epochs` passes.
    pub iterations: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn new(n_aligned: usize, n_unaligned: usize, cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainPlan {
            p: aligned_probability(n_aligned, n_unaligned)?,
            iterations: None,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        })
    }
}

/// Per-iteration coin `p_i ~ U(0, 1)`; `p_i ≤ p` selects the federated branch.
pub struct BranchSampler {
    p: f64,
    rng: ChaCha8Rng,
}

impl BranchSampler {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(VflError::invalid(format!("p must lie in [0, 1], got {p}")));
        }
        Ok(BranchSampler {
            p,
            rng: stream_rng(seed, streams::ALTERNATION),
        })
    }

    pub fn next_branch(&mut self) -> BranchKind {
        let draw: f64 = self.rng.random();
        if draw <= self.p {
            BranchKind::Federated
        } else {
            BranchKind::Local
        }
    }
}

/// Synthesized cut inputs for label-only samples; features and labels stay
/// with the label party.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedUnalignedSet {
    pub sample_ids: Vec<String>,
    pub embeddings: Tensor,
    /// Samples that received no embedding (heuristic mode only).
    pub dropped: usize,
}

impl AugmentedUnalignedSet {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesizerKind {
    #[default]
    Diffusion,
    Heuristic,
}

pub enum Synthesizer<'a> {
    Diffusion { denoiser: &'a Denoiser, seed: u64 },
    Heuristic(&'a EmbeddingCache),
}

/// Attaches a synthesized federated embedding to each unaligned sample.
/// `h_l` holds the label-party representations in `unaligned` order.
pub fn build_unaligned_set(unaligned: &Dataset, h_l: &Tensor, synth: Synthesizer<'_>) -> Result<AugmentedUnalignedSet> {
    if h_l.rows() != unaligned.len() {
        return Err(VflError::dim("build_unaligned_set", unaligned.len(), h_l.rows()));
    }
    match synth {
        Synthesizer::Diffusion { denoiser, seed } => {
            let embeddings = sample_embeddings(denoiser, &unaligned.labels(), h_l, seed)?;
            Ok(AugmentedUnalignedSet {
                sample_ids: unaligned.records.iter().map(|r| r.sample_id.clone()).collect(),
                embeddings,
                dropped: 0,
            })
        }
        Synthesizer::Heuristic(cache) => {
            let mut ids = Vec::new();
            let mut data = Vec::new();
            let mut dim = 0;
            for r in &unaligned.records {
                if let Some(e) = heuristic_embedding(r.user_id, cache) {
                    dim = e.len();
                    ids.push(r.sample_id.clone());
                    data.extend(e);
                }
            }
            let dropped = unaligned.len() - ids.len();
            Ok(AugmentedUnalignedSet {
                embeddings: Tensor::from_vec(ids.len(), dim, data)?,
                sample_ids: ids,
                dropped,
            })
        }
    }
}

/// Which branch each iteration updated, plus its loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AlternationTrace {
    pub branches: Vec<BranchKind>,
    pub losses: Vec<f64>,
}

impl AlternationTrace {
    pub fn aligned_fraction(&self) -> f64 {
        let n = self.branches.iter().filter(|&&b| b == BranchKind::Federated).count();
        n as f64 / self.branches.len().max(1) as f64
    }
}

/// Cycles through shuffled batches forever, reshuffling on every pass.
struct CyclingBatches {
    ids: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    pos: usize,
}

impl CyclingBatches {
    fn new(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Self {
        CyclingBatches {
            ids: (0..n).collect(),
            batch_size,
            rng,
            pos: n,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.ids.len();
        if self.pos + 2 > n {
            self.ids.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(n);
        let b = self.ids[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

/// Algorithm-style alternation. The federation must already hold the
/// aligned samples and the label party the unaligned ones; the local branch
/// is enabled if missing.
pub fn alternative_train(
    fed: &mut Federation,
    aligned_ids: &[String],
    unaligned: &AugmentedUnalignedSet,
    plan: &TrainPlan,
) -> Result<AlternationTrace> {
    if aligned_ids.is_empty() {
        return Err(VflError::invalid("no aligned samples"));
    }
    if plan.batch_size < 2 {
        return Err(VflError::Config("batch_size must be >= 2".into()));
    }
    if unaligned.len() < 2 && plan.p < 1.0 {
        return Err(VflError::invalid("local branch needs at least 2 unaligned samples"));
    }
    if fed.label.local.is_none() {
        fed.label.enable_local_branch(None);
    }
    let aligned_batches = batch_schedule(aligned_ids, plan.batch_size, plan.epochs, plan.seed);
    let mut aligned_iter = aligned_batches.into_iter();
    let mut local_stream = CyclingBatches::new(
        unaligned.len(),
        plan.batch_size,
        stream_rng(derive_seed(plan.seed, streams::BATCH_ORDER), 1),
    );
    let mut sampler = BranchSampler::new(plan.p, plan.seed)?;
    let mut trace = AlternationTrace::default();
    loop {
        if plan.iterations.is_some_and(|cap| trace.branches.len() >= cap) {
            break;
        }
        let branch = sampler.next_branch();
        let loss = match branch {
            BranchKind::Federated => {
                let Some(ids) = aligned_iter.next() else {
                    break;
                };
                fed.train_batches(std::slice::from_ref(&ids))?[0]
            }
            BranchKind::Local => {
                let rows = local_stream.next_batch();
                let ids: Vec<String> = rows.iter().map(|&i| unaligned.sample_ids[i].clone()).collect();
                let h = unaligned.embeddings.select_rows(&rows);
                fed.label.train_step(BranchKind::Local, &ids, &h, true)?.loss
            }
        };
        trace.branches.push(branch);
        trace.losses.push(loss);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffuAtConfig {
    pub model: ModelConfig,
    /// Pretraining of the split model on aligned samples.
    pub pretrain: TrainConfig,
    /// Alternative training; its seed also drives branch sampling.
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub synthesizer: SynthesizerKind,
    /// Start alternative training from fresh weights instead of the pretrained model.
    pub fresh_init: bool,
    /// With no unaligned samples, skip synthesis and train with `p = 1`.
    pub allow_empty_unaligned: bool,
}

impl Default for DiffuAtConfig {
    fn default() -> Self {
        DiffuAtConfig {
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
            diffusion: DiffusionConfig::default(),
            synthesizer: SynthesizerKind::Diffusion,
            fresh_init: false,
            allow_empty_unaligned: false,
        }
    }
}

pub struct DiffuAtOutcome {
    /// Federated model with the local branch dropped.
    pub federation: Federation,
    pub pretrained: Option<Federation>,
    pub denoiser: Option<Denoiser>,
    pub diffusion_losses: Vec<f64>,
    pub augmented: AugmentedUnalignedSet,
    pub trace: AlternationTrace,
    pub p: f64,
}

fn ids_of(ds: &Dataset) -> Vec<String> {
    ds.records.iter().map(|r| r.sample_id.clone()).collect()
}

/// Full pipeline. `keep_pretrained` retains a copy of the pretrained model
/// for checkpointing.
pub fn diffu_at(
    aligned: &Dataset,
    unaligned: &Dataset,
    vocab: &VocabSizes,
    cfg: &DiffuAtConfig,
    keep_pretrained: bool,
) -> Result<DiffuAtOutcome> {
    if aligned.is_empty() {
        return Err(VflError::invalid("no aligned samples"));
    }
    if unaligned.is_empty() && !cfg.allow_empty_unaligned {
        return Err(VflError::invalid("no unaligned samples"));
    }
    if unaligned.records.iter().any(|r| r.nonlabel_features.is_some()) {
        return Err(VflError::invalid("unaligned samples must not carry non-label features"));
    }
    cfg.diffusion.validate()?;

    let mut fed = train_vanilla(aligned, vocab, &cfg.model, &cfg.pretrain)?;
    let aligned_ids = ids_of(aligned);

    let mut denoiser = None;
    let mut diffusion_losses = Vec::new();
    let augmented = if unaligned.is_empty() {
        AugmentedUnalignedSet {
            sample_ids: Vec::new(),
            embeddings: Tensor::zeros(0, cfg.model.cut_dim()),
            dropped: 0,
        }
    } else {
        fed.label.load_samples(unaligned);
        let h_n = fed.exchange_embeddings(&aligned_ids)?;
        let h_l_unaligned = fed.label.representations(&ids_of(unaligned))?;
        match cfg.synthesizer {
            SynthesizerKind::Diffusion => {
                let data = DiffusionData {
                    h_n,
                    h_l: fed.label.representations(&aligned_ids)?,
                    labels: aligned.labels(),
                };
                let fit = train_diffusion(&data, &cfg.diffusion)?;
                diffusion_losses = fit.losses;
                let set = build_unaligned_set(
                    unaligned,
                    &h_l_unaligned,
                    Synthesizer::Diffusion {
                        denoiser: &fit.denoiser,
                        seed: cfg.diffusion.seed,
                    },
                )?;
                denoiser = Some(fit.denoiser);
                set
            }
            SynthesizerKind::Heuristic => {
                let users: Vec<u32> = aligned.records.iter().map(|r| r.user_id).collect();
                let cache = EmbeddingCache::build(&users, &h_n)?;
                build_unaligned_set(unaligned, &h_l_unaligned, Synthesizer::Heuristic(&cache))?
            }
        }
    };

    let pretrained = if keep_pretrained {
        Some(snapshot(&fed, vocab, &cfg.model, &cfg.pretrain)?)
    } else {
        None
    };

    if cfg.fresh_init {
        let mut fresh_cfg = cfg.train.clone();
        fresh_cfg.seed = derive_seed(cfg.train.seed, streams::LOCAL_BRANCH_INIT);
        fed = Federation::new(vocab, &cfg.model, &fresh_cfg)?;
        fed.transport = cfg.train.transport;
        fed.load(aligned);
        fed.label.load_samples(unaligned);
        fed.label
            .enable_local_branch(Some(derive_seed(cfg.train.seed, streams::LOCAL_BRANCH_INIT)));
    } else {
        fed.transport = cfg.train.transport;
        fed.label.enable_local_branch(None);
    }
    fed.label.set_defense(cfg.train.defense.build()?);
    fed.nonlabel.record_trace = cfg.train.record_trace;

    let plan = TrainPlan::new(aligned.len(), augmented.len(), &cfg.train)?;
    let trace = alternative_train(&mut fed, &aligned_ids, &augmented, &plan)?;
    fed.label.drop_local_branch();
    Ok(DiffuAtOutcome {
        federation: fed,
        pretrained,
        denoiser,
        diffusion_losses,
        augmented,
        trace,
        p: plan.p,
    })
}

/// Independent copy of a federation's weights (no samples, no optimizer moments).
fn snapshot(fed: &Federation, vocab: &VocabSizes, model: &ModelConfig, cfg: &TrainConfig) -> Result<Federation> {
    let mut copy = Federation::new(vocab, model, cfg)?;
    let bytes = write_model(fed, Vec::new())?;
    read_model_into(&mut copy, &bytes[..])?;
    Ok(copy)
}

const MODEL_MAGIC: &[u8; 8] = b"VFLMODEL";
const MODEL_VERSION: u32 = 1;

fn model_tensors(fed: &Federation) -> Vec<&Tensor> {
    let mut t = fed.nonlabel.params();
    t.extend(fed.label.shared_params());
    let b = &fed.label.federated;
    for n in &b.norms {
        t.extend([&n.gamma, &n.beta, &n.running_mean, &n.running_var]);
    }
    t.extend([&b.top.weight, &b.top.bias]);
    t
}

fn model_tensors_mut(fed: &mut Federation) -> Vec<&mut Tensor> {
    let mut t: Vec<&mut Tensor> = vec![&mut fed.nonlabel.embed.table.rows];
    for l in &mut fed.nonlabel.layers {
        t.extend([&mut l.weight, &mut l.bias]);
    }
    t.push(&mut fed.label.embed.table.rows);
    t.extend(fed.label.bottom.iter_mut().map(|l| &mut l.weight));
    let b = &mut fed.label.federated;
    for n in &mut b.norms {
        t.extend([&mut n.gamma, &mut n.beta, &mut n.running_mean, &mut n.running_var]);
    }
    t.extend([&mut b.top.weight, &mut b.top.bias]);
    t
}

/// Serializes the inference-relevant weights of both parties (federated branch only).
pub fn write_model<W: Write>(fed: &Federation, w: W) -> Result<W> {
    let tensors = model_tensors(fed);
    let mut b = BinWriter::new(w, MODEL_MAGIC, MODEL_VERSION)?;
    b.len(tensors.len())?;
    for t in tensors {
        b.tensor(t)?;
    }
    b.finish()
}

/// Loads weights written by [`write_model`] into a federation of the same shape.
pub fn read_model_into<R: Read>(fed: &mut Federation, r: R) -> Result<()> {
    let mut b = BinReader::new(r, MODEL_MAGIC)?;
    if b.version != MODEL_VERSION {
        return Err(VflError::Decode(format!("unsupported model version {}", b.version)));
    }
    let mut slots = model_tensors_mut(fed);
    let n = b.len()?;
    if n != slots.len() {
        return Err(VflError::Decode(format!("expected {} tensors, found {n}", slots.len())));
    }
    let loaded = (0..n).map(|_| b.tensor()).collect::<Result<Vec<_>>>()?;
    b.finish()?;
    for (slot, t) in slots.iter().zip(&loaded) {
        if slot.shape() != t.shape() {
            return Err(VflError::Decode(format!(
                "tensor shape {:?} does not match model {:?}",
                t.shape(),
                slot.shape()
            )));
        }
    }
    for (slot, t) in slots.iter_mut().zip(loaded) {
        **slot = t;
    }
    Ok(())
}

pub fn save_model(fed: &Federation, path: impl AsRef<Path>) -> Result<()> {
    write_model(fed, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_model_into(fed: &mut Federation, path: impl AsRef<Path>) -> Result<()> {
    read_model_into(fed, BufReader::new(File::open(path)?))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

/// Reproducibility record for a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            seed,
            config,
            artifacts: Vec::new(),
        }
    }

    /// Records `dir/rel` with its current hash.
    pub fn add(&mut self, name: &str, dir: &Path, rel: impl Into<PathBuf>) -> Result<()> {
        let rel = rel.into();
        let sha256 = sha256_file(dir.join(&rel))?;
        self.artifacts.push(ArtifactEntry {
            name: name.to_string(),
            path: rel,
            sha256,
        });
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Recomputes every hash; returns the names that no longer match.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            if sha256_file(dir.join(&a.path))? != a.sha256 {
                bad.push(a.name.clone());
            }
        }
        Ok(bad)
    }
}
