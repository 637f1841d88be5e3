//! Synthetic federated embeddings for samples the non-label party never saw.
//!
//! The diffusion model noises only the `h_N` block of `z = [y; h_L; h_N]` and
//! learns to undo it conditioned on the untouched `[y; h_L]` block. The
//! per-user average is the simpler baseline.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BinReader, BinWriter};
use crate::error::{Result, VflError};
use crate::nn::{Activation, AdamConfig, AdamState, DenseLayer};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_TIMESTEP_DIM: usize = 32;

/// Linear variance schedule. Index `t` runs over `1..=T`; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `1 − ᾱ_t` accumulated directly, so `1 − ᾱ_1 = β_1` holds exactly.
    noise_levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(VflError::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(VflError::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = vec![1.0];
        let mut noise_levels = vec![0.0];
        for (t, b) in betas.iter().enumerate() {
            alpha_bars.push(alpha_bars[t] * (1.0 - b));
            noise_levels.push(noise_levels[t] + alpha_bars[t] * b);
        }
        Ok(NoiseSchedule {
            beta_start,
            beta_end,
            betas,
            alpha_bars,
            noise_levels,
        })
    }

    pub fn with_steps(steps: usize) -> Result<Self> {
        Self::linear(steps, BETA_START, BETA_END)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(VflError::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// # Panics
    /// If `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Defined for `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `1 − ᾱ_t`, defined for `0..=T`.
    pub fn noise_level(&self, t: usize) -> f64 {
        self.noise_levels[t]
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) β_t / (1 − ᾱ_t)`, zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.noise_level(t - 1) * self.beta(t) / self.noise_level(t)
    }

    /// Weights of `z_t` and `z_0` in the forward-process posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let denom = self.noise_level(t);
        (
            self.alpha(t).sqrt() * self.noise_level(t - 1) / denom,
            self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom,
        )
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form marginal `h_t = √ᾱ_t·h_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<R: Rng + ?Sized>(h0: &[f64], t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let (a, s) = (schedule.alpha_bar(t).sqrt(), schedule.noise_level(t).sqrt());
    Ok(h0
        .iter()
        .map(|&h| a * h + s * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// One forward transition `h_t = √α_t·h_{t−1} + √β_t·ε`.
pub fn q_step<R: Rng + ?Sized>(h_prev: &[f64], t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let (a, s) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    Ok(h_prev
        .iter()
        .map(|&h| a * h + s * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Mean of `q(h_{t−1} | h_t, h_0)`.
pub fn posterior_mean(z_t: &[f64], z_0: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if z_t.len() != z_0.len() {
        return Err(VflError::dim("posterior_mean", z_t.len(), z_0.len()));
    }
    let (ct, c0) = schedule.posterior_coefficients(t);
    Ok(z_t.iter().zip(z_0).map(|(a, b)| ct * a + c0 * b).collect())
}

/// Sinusoidal encoding: `sin(t·ω_k)` then `cos(t·ω_k)`, `ω_k = 10000^(−k/(dim/2))`.
pub fn timestep_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * w).sin();
        out[half + k] = (t as f64 * w).cos();
    }
    out
}

/// `z_t` split into its fixed condition and its noised embedding block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedState {
    pub y: [f64; 2],
    pub h_l: Vec<f64>,
    pub h_n: Vec<f64>,
}

impl ConditionedState {
    pub fn packed(&self) -> Vec<f64> {
        let mut z = self.y.to_vec();
        z.extend_from_slice(&self.h_l);
        z.extend_from_slice(&self.h_n);
        z
    }
}

/// `[onehot(y); h_L]` per row.
pub fn condition_block(labels: &[u8], h_l: &Tensor) -> Result<Tensor> {
    if labels.len() != h_l.rows() {
        return Err(VflError::dim("condition_block", h_l.rows(), labels.len()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(VflError::invalid("labels must be 0 or 1"));
    }
    Ok(Tensor::from_fn(h_l.rows(), 2 + h_l.cols(), |i, j| match j {
        0 => f64::from(labels[i] == 0),
        1 => f64::from(labels[i] == 1),
        _ => h_l.get(i, j - 2),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub timestep_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: DEFAULT_STEPS,
            beta_start: BETA_START,
            beta_end: BETA_END,
            hidden: vec![256, 256],
            timestep_dim: DEFAULT_TIMESTEP_DIM,
            train_steps: 5000,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(VflError::Config("denoiser needs non-empty hidden widths".into()));
        }
        if self.batch_size == 0 {
            return Err(VflError::Config("diffusion batch_size must be > 0".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(VflError::Config("diffusion learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// MLP over `[y; h_L; h_t; enc(t)]` predicting the clean embedding block. The
/// reverse mean is the forward posterior mean evaluated at that prediction.
///
/// Works on standardized embeddings; `shift`/`scale` map back to the
/// original coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub schedule: NoiseSchedule,
    pub layers: Vec<DenseLayer>,
    pub label_dim: usize,
    pub embed_dim: usize,
    pub timestep_dim: usize,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

const DENOISER_MAGIC: &[u8; 8] = b"VFLDENOI";
const DENOISER_VERSION: u32 = 1;

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: &DiffusionConfig, label_dim: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut width = 2 + label_dim + embed_dim + config.timestep_dim;
        for &h in &config.hidden {
            layers.push(DenseLayer::new(width, h, Activation::Relu, rng));
            width = h;
        }
        layers.push(DenseLayer::new(width, embed_dim, Activation::Identity, rng));
        Ok(Denoiser {
            schedule: NoiseSchedule::linear(config.steps, config.beta_start, config.beta_end)?,
            layers,
            label_dim,
            embed_dim,
            timestep_dim: config.timestep_dim,
            shift: vec![0.0; embed_dim],
            scale: vec![1.0; embed_dim],
        })
    }

    pub fn condition_dim(&self) -> usize {
        2 + self.label_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn standardize(&self, h: &Tensor) -> Tensor {
        Tensor::from_fn(h.rows(), h.cols(), |i, j| (h.get(i, j) - self.shift[j]) / self.scale[j])
    }

    pub fn unstandardize(&self, h: &Tensor) -> Tensor {
        Tensor::from_fn(h.rows(), h.cols(), |i, j| h.get(i, j) * self.scale[j] + self.shift[j])
    }

    fn inputs(&self, cond: &Tensor, h_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if cond.cols() != self.condition_dim() || h_t.cols() != self.embed_dim {
            return Err(VflError::dim(
                "denoiser input",
                format!("({}, {})", self.condition_dim(), self.embed_dim),
                format!("({}, {})", cond.cols(), h_t.cols()),
            ));
        }
        if cond.rows() != h_t.rows() || ts.len() != h_t.rows() {
            return Err(VflError::dim("denoiser batch", h_t.rows(), cond.rows().min(ts.len())));
        }
        let (cd, ed) = (self.condition_dim(), self.embed_dim);
        let mut x = Tensor::zeros(h_t.rows(), cd + ed + self.timestep_dim);
        for i in 0..h_t.rows() {
            let row = x.row_mut(i);
            row[..cd].copy_from_slice(cond.row(i));
            row[cd..cd + ed].copy_from_slice(h_t.row(i));
            row[cd + ed..].copy_from_slice(&timestep_encoding(ts[i], self.timestep_dim));
        }
        Ok(x)
    }

    fn forward_all(&self, x: Tensor) -> Result<Vec<Tensor>> {
        let mut acts = vec![x];
        for l in &self.layers {
            let next = l.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Predicted clean (standardized) embedding block.
    pub fn predict_clean(&self, cond: &Tensor, h_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        for &t in ts {
            self.schedule.check_step(t)?;
        }
        let mut acts = self.forward_all(self.inputs(cond, h_t, ts)?)?;
        Ok(acts.pop().expect("non-empty"))
    }

    /// `μ_Θ(z_t, t)` over the (standardized) embedding block.
    pub fn mean(&self, cond: &Tensor, h_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let x0 = self.predict_clean(cond, h_t, ts)?;
        Ok(Tensor::from_fn(h_t.rows(), self.embed_dim, |i, j| {
            let (ct, c0) = self.schedule.posterior_coefficients(ts[i]);
            ct * h_t.get(i, j) + c0 * x0.get(i, j)
        }))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<W> {
        let mut b = BinWriter::new(w, DENOISER_MAGIC, DENOISER_VERSION)?;
        let (bs, be) = self.schedule.beta_range();
        b.len(self.schedule.steps())?;
        b.f64(bs)?;
        b.f64(be)?;
        b.len(self.label_dim)?;
        b.len(self.embed_dim)?;
        b.len(self.timestep_dim)?;
        b.len(self.layers.len())?;
        for l in &self.layers {
            b.dense(l)?;
        }
        b.f64s(&self.shift)?;
        b.f64s(&self.scale)?;
        b.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut b = BinReader::new(r, DENOISER_MAGIC)?;
        if b.version != DENOISER_VERSION {
            return Err(VflError::Decode(format!("unsupported denoiser version {}", b.version)));
        }
        let steps = b.len()?;
        let (bs, be) = (b.f64()?, b.f64()?);
        let schedule = NoiseSchedule::linear(steps, bs, be)
            .map_err(|e| VflError::Decode(format!("bad schedule: {e}")))?;
        let label_dim = b.len()?;
        let embed_dim = b.len()?;
        let timestep_dim = b.len()?;
        let n_layers = b.len()?;
        let layers = (0..n_layers).map(|_| b.dense()).collect::<Result<Vec<_>>>()?;
        let shift = b.f64s()?;
        let scale = b.f64s()?;
        b.finish()?;
        let d = Denoiser {
            schedule,
            layers,
            label_dim,
            embed_dim,
            timestep_dim,
            shift,
            scale,
        };
        d.check_consistent()?;
        Ok(d)
    }

    fn check_consistent(&self) -> Result<()> {
        let first = self.layers.first().map(DenseLayer::in_dim);
        let last = self.layers.last().map(DenseLayer::out_dim);
        let chained = self.layers.windows(2).all(|w| w[0].out_dim() == w[1].in_dim());
        if first != Some(self.condition_dim() + self.embed_dim + self.timestep_dim)
            || last != Some(self.embed_dim)
            || !chained
            || self.shift.len() != self.embed_dim
            || self.scale.len() != self.embed_dim
        {
            return Err(VflError::Decode("denoiser shapes are inconsistent".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Aligned-sample triples the generator learns from.
#[derive(Clone, Debug)]
pub struct DiffusionData {
    pub h_n: Tensor,
    pub h_l: Tensor,
    pub labels: Vec<u8>,
}

impl DiffusionData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct DiffusionFit {
    pub denoiser: Denoiser,
    /// Mini-batch loss per training step.
    pub losses: Vec<f64>,
}

/// Floor for per-dimension standard deviations.
const MIN_SCALE: f64 = 1e-6;

/// Minimizes `E_t,ε ‖μ̃_t(z_t, z_0) − μ_Θ(z_t, t)‖²` with `t` uniform per sample.
pub fn train_diffusion(data: &DiffusionData, config: &DiffusionConfig) -> Result<DiffusionFit> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(VflError::invalid("no training pairs for the diffusion model"));
    }
    if data.h_n.rows() != n || data.h_l.rows() != n {
        return Err(VflError::dim("train_diffusion", n, data.h_n.rows().min(data.h_l.rows())));
    }
    let mut init_rng = stream_rng(config.seed, streams::DIFFUSION_INIT);
    let mut den = Denoiser::new(config, data.h_l.cols(), data.h_n.cols(), &mut init_rng)?;
    den.shift = data.h_n.col_means();
    den.scale = (0..den.embed_dim)
        .map(|j| {
            let m = den.shift[j];
            let var = data.h_n.iter_rows().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            var.sqrt().max(MIN_SCALE)
        })
        .collect();
    let h0_all = den.standardize(&data.h_n);
    let cond_all = condition_block(&data.labels, &data.h_l)?;

    let mut opt = AdamState::for_params(config.adam, &den.params());
    let mut rng = stream_rng(config.seed, streams::DIFFUSION_TRAIN);
    let steps = den.schedule.steps();
    let b = config.batch_size;
    let mut losses = Vec::with_capacity(config.train_steps);
    for _ in 0..config.train_steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=steps)).collect();
        let h0 = h0_all.select_rows(&idx);
        let cond = cond_all.select_rows(&idx);
        let mut h_t = Tensor::zeros(b, den.embed_dim);
        for i in 0..b {
            let noised = q_sample(h0.row(i), ts[i], &den.schedule, &mut rng)?;
            h_t.row_mut(i).copy_from_slice(&noised);
        }

        let acts = den.forward_all(den.inputs(&cond, &h_t, &ts)?)?;
        let pred = acts.last().expect("non-empty");
        // μ̃ − μ_Θ = c0·(h0 − ĥ0), so only the clean-block error matters
        let mut loss = 0.0;
        let mut upstream = Tensor::zeros(b, den.embed_dim);
        for i in 0..b {
            let (_, c0) = den.schedule.posterior_coefficients(ts[i]);
            let w = c0 * c0;
            for j in 0..den.embed_dim {
                let d = pred.get(i, j) - h0.get(i, j);
                loss += w * d * d;
                upstream.set(i, j, 2.0 * w * d / b as f64);
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(VflError::Numeric("diffusion loss diverged".into()));
        }
        losses.push(loss);

        let mut grads = Vec::with_capacity(2 * den.layers.len());
        for k in (0..den.layers.len()).rev() {
            let g = den.layers[k].backward_with_output(&acts[k], &acts[k + 1], &upstream)?;
            grads.push(g.bias);
            grads.push(g.weight);
            upstream = g.input;
        }
        grads.reverse();
        let mut params: Vec<&mut Tensor> = den
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        opt.update(&mut params, &grads.iter().collect::<Vec<_>>())?;
    }
    Ok(DiffusionFit { denoiser: den, losses })
}

/// Reverse chain over a batch with per-row random streams. `on_step(t, h_t)`
/// sees the standardized embedding block after each transition to `t − 1`.
fn reverse_chain<R: Rng>(
    den: &Denoiser,
    cond: &Tensor,
    rngs: &mut [R],
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let b = cond.rows();
    let (cd, ed, td) = (den.condition_dim(), den.embed_dim, den.timestep_dim);
    let first = &den.layers[0];
    let h1 = first.out_dim();
    // the first layer splits into condition, embedding and time parts
    let w_cond = Tensor::from_fn(h1, cd, |i, j| first.weight.get(i, j));
    let w_emb = Tensor::from_fn(h1, ed, |i, j| first.weight.get(i, cd + j));
    let w_time = Tensor::from_fn(h1, td, |i, j| first.weight.get(i, cd + ed + j));
    let cond_proj = cond.matmul_nt(&w_cond)?;

    let mut h = Tensor::zeros(b, ed);
    for (i, rng) in rngs.iter_mut().enumerate() {
        h.row_mut(i).copy_from_slice(&normal_vec(ed, rng));
    }
    for t in (1..=den.schedule.steps()).rev() {
        let enc = Tensor::from_vec(1, td, timestep_encoding(t, td))?;
        let time_proj = enc.matmul_nt(&w_time)?;
        let mut pre = h.matmul_nt(&w_emb)?;
        pre.add_assign(&cond_proj)?;
        let shared: Vec<f64> = time_proj
            .row(0)
            .iter()
            .zip(first.bias.data())
            .map(|(a, c)| a + c)
            .collect();
        pre.add_row_broadcast(&shared)?;
        let mut x = pre.map(|v| v.max(0.0));
        for l in &den.layers[1..] {
            x = l.forward(&x)?;
        }
        let (ct, c0) = den.schedule.posterior_coefficients(t);
        let sigma = den.schedule.posterior_variance(t).sqrt();
        for (i, rng) in rngs.iter_mut().enumerate() {
            let noise = if t > 1 { normal_vec(ed, rng) } else { vec![0.0; ed] };
            let pred = x.row(i);
            for (j, v) in h.row_mut(i).iter_mut().enumerate() {
                *v = ct * *v + c0 * pred[j] + sigma * noise[j];
            }
        }
        on_step(t, &h);
    }
    Ok(den.unstandardize(&h))
}

fn check_sampling_inputs(den: &Denoiser, labels: &[u8], h_l: &Tensor) -> Result<Tensor> {
    if h_l.cols() != den.label_dim {
        return Err(VflError::dim("sample_embeddings", den.label_dim, h_l.cols()));
    }
    condition_block(labels, h_l)
}

/// One synthesized embedding for condition `(y, h_L)`.
pub fn sample_embedding<R: Rng>(y: u8, h_l: &[f64], den: &Denoiser, rng: &mut R) -> Result<Vec<f64>> {
    sample_embedding_traced(y, h_l, den, rng, |_, _| {})
}

/// Like [`sample_embedding`], reporting the full state `z_{t−1}` after every
/// reverse step in original coordinates.
pub fn sample_embedding_traced<R: Rng>(
    y: u8,
    h_l: &[f64],
    den: &Denoiser,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &ConditionedState),
) -> Result<Vec<f64>> {
    let h_l_t = Tensor::from_vec(1, h_l.len(), h_l.to_vec())?;
    let cond = check_sampling_inputs(den, &[y], &h_l_t)?;
    let y_block = [cond.get(0, 0), cond.get(0, 1)];
    let out = reverse_chain(den, &cond, std::slice::from_mut(rng), |t, h| {
        let state = ConditionedState {
            y: y_block,
            h_l: h_l.to_vec(),
            h_n: den.unstandardize(h).row(0).to_vec(),
        };
        on_step(t, &state);
    })?;
    Ok(out.row(0).to_vec())
}

/// Rows processed per reverse-chain batch; results do not depend on it.
pub const SAMPLE_BATCH: usize = 1024;

/// Synthesizes one embedding per row. Row `i` draws from its own stream
/// derived from `(seed, i)`, so output is independent of batching.
pub fn sample_embeddings(den: &Denoiser, labels: &[u8], h_l: &Tensor, seed: u64) -> Result<Tensor> {
    let cond = check_sampling_inputs(den, labels, h_l)?;
    let base = derive_seed(seed, streams::DIFFUSION_SAMPLE);
    let mut out = Vec::with_capacity(cond.rows() * den.embed_dim);
    let all: Vec<usize> = (0..cond.rows()).collect();
    for chunk in all.chunks(SAMPLE_BATCH) {
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&i| stream_rng(base, i as u64)).collect();
        let h = reverse_chain(den, &cond.select_rows(chunk), &mut rngs, |_, _| {})?;
        out.extend_from_slice(h.data());
    }
    Tensor::from_vec(cond.rows(), den.embed_dim, out)
}

/// Per-user running sums of federated embeddings from aligned samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    entries: HashMap<u32, (Vec<f64>, usize)>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn build(user_ids: &[u32], embeddings: &Tensor) -> Result<Self> {
        if user_ids.len() != embeddings.rows() {
            return Err(VflError::dim("EmbeddingCache::build", embeddings.rows(), user_ids.len()));
        }
        let mut c = Self::new();
        for (&u, row) in user_ids.iter().zip(embeddings.iter_rows()) {
            c.add(u, row)?;
        }
        Ok(c)
    }

    pub fn add(&mut self, user_id: u32, embedding: &[f64]) -> Result<()> {
        let e = self
            .entries
            .entry(user_id)
            .or_insert_with(|| (vec![0.0; embedding.len()], 0));
        if e.0.len() != embedding.len() {
            return Err(VflError::dim("EmbeddingCache::add", e.0.len(), embedding.len()));
        }
        e.0.iter_mut().zip(embedding).for_each(|(s, v)| *s += v);
        e.1 += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, user_id: u32) -> usize {
        self.entries.get(&user_id).map_or(0, |e| e.1)
    }
}

/// Average embedding of the user's aligned samples, if any.
pub fn heuristic_embedding(user_id: u32, cache: &EmbeddingCache) -> Option<Vec<f64>> {
    cache
        .entries
        .get(&user_id)
        .map(|(sum, n)| sum.iter().map(|s| s / *n as f64).collect())
}

/// `sample_id` followed by one column per embedding coordinate.
pub fn write_embeddings_tsv<W: Write>(ids: &[String], embeddings: &Tensor, mut w: W) -> Result<()> {
    if ids.len() != embeddings.rows() {
        return Err(VflError::dim("write_embeddings_tsv", embeddings.rows(), ids.len()));
    }
    write!(w, "sample_id")?;
    for j in 0..embeddings.cols() {
        write!(w, "\th{j}")?;
    }
    writeln!(w)?;
    for (id, row) in ids.iter().zip(embeddings.iter_rows()) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_embeddings_tsv<R: BufRead>(r: R) -> Result<(Vec<String>, Tensor)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or(VflError::Parse { line: 1, msg: "missing header".into() })?;
    let dim = header.split('\t').count().saturating_sub(1);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        let lineno = k + 2;
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let vals: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| VflError::Parse {
                    line: lineno,
                    msg: format!("bad value {f:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != dim {
            return Err(VflError::Parse {
                line: lineno,
                msg: format!("expected {dim} values, found {}", vals.len()),
            });
        }
        ids.push(id);
        data.extend(vals);
    }
    let t = Tensor::from_vec(ids.len(), dim, data)?;
    Ok((ids, t))
}
