//! Perturbations applied by the label party to the cut-layer gradient batch
//! before it is sent: MixPro (in-batch mixup followed by projection towards
//! the batch-mean gradient) and a clipped Gaussian-noise baseline.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VflError};
use crate::tensor::{dot, l2_norm, Tensor};

/// Per-sample cut gradients, one row each, plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBatch {
    grads: Tensor,
    mean: Vec<f64>,
}

impl GradBatch {
    pub fn new(grads: Tensor) -> Self {
        let mean = grads.col_means();
        GradBatch { grads, mean }
    }

    pub fn grads(&self) -> &Tensor {
        &self.grads
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn len(&self) -> usize {
        self.grads.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.rows() == 0
    }

    pub fn into_grads(self) -> Tensor {
        self.grads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixProConfig {
    pub alpha: f64,
    pub phi_goal: f64,
    pub seed: u64,
}

impl Default for MixProConfig {
    fn default() -> Self {
        MixProConfig {
            alpha: 0.6,
            phi_goal: 3f64.sqrt() / 2.0,
            seed: 0,
        }
    }
}

impl MixProConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(VflError::invalid("mixpro alpha must be > 0"));
        }
        check_phi_goal(self.phi_goal)
    }
}

fn check_phi_goal(phi_goal: f64) -> Result<()> {
    if !(phi_goal > -1.0 && phi_goal < 1.0) {
        return Err(VflError::invalid(format!(
            "phi_goal must lie strictly inside (-1, 1), got {phi_goal}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(VflError::invalid("dp clip_norm must be > 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(VflError::invalid("dp noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// Mixup weight: λ' ~ Beta(α, α) from two Gamma(α, 1) draws, reflected into (0.5, 1].
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| VflError::invalid(format!("alpha = {alpha}: {e}")))?;
    let x = gamma.sample(rng);
    let y = gamma.sample(rng);
    let sum = x + y;
    if sum <= 0.0 {
        return Ok(1.0);
    }
    let l = x / sum;
    Ok(l.max(1.0 - l))
}

/// Mixes each row with an explicit partner and weight:
/// `out_i = λ_i·g_i + (1 − λ_i)·g_{partner_i}`.
pub fn mixup_with(grads: &Tensor, partners: &[usize], lambdas: &[f64]) -> Result<Tensor> {
    let b = grads.rows();
    if partners.len() != b || lambdas.len() != b {
        return Err(VflError::dim("mixup_with", b, partners.len().min(lambdas.len())));
    }
    let mut out = Tensor::zeros(b, grads.cols());
    for i in 0..b {
        let r = partners[i];
        if r >= b {
            return Err(VflError::Index { index: r, size: b });
        }
        let lam = lambdas[i];
        let (gi, gr) = (grads.row(i), grads.row(r));
        for (o, (a, c)) in out.row_mut(i).iter_mut().zip(gi.iter().zip(gr)) {
            *o = a + (1.0 - lam) * (c - a);
        }
    }
    Ok(out)
}

/// Random-partner mixup: partner drawn uniformly from the batch excluding the
/// sample itself, fresh λ per sample.
pub fn mixup<R: Rng + ?Sized>(batch: &GradBatch, alpha: f64, rng: &mut R) -> Result<GradBatch> {
    let b = batch.len();
    if b < 2 {
        return Err(VflError::invalid("mixup needs a batch of at least 2"));
    }
    let mut partners = Vec::with_capacity(b);
    let mut lambdas = Vec::with_capacity(b);
    for i in 0..b {
        let mut r = rng.random_range(0..b - 1);
        if r >= i {
            r += 1;
        }
        partners.push(r);
        lambdas.push(sample_lambda(alpha, rng)?);
    }
    Ok(GradBatch::new(mixup_with(batch.grads(), &partners, &lambdas)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Cosine already meets the goal; the row is returned bitwise unchanged.
    Satisfied,
    Projected,
    /// Zero mean or zero row: cosine undefined, row returned unchanged.
    Degenerate,
}

/// Raises the cosine between `g` and `mean` to `phi_goal` by adding a
/// multiple of `mean`. Rows already at or above the goal pass through.
pub fn project(g: &[f64], mean: &[f64], phi_goal: f64) -> Result<(Vec<f64>, Projection)> {
    check_phi_goal(phi_goal)?;
    if g.len() != mean.len() {
        return Err(VflError::dim("project", mean.len(), g.len()));
    }
    let g_norm = l2_norm(g);
    let m_norm = l2_norm(mean);
    if g_norm == 0.0 || m_norm == 0.0 {
        return Ok((g.to_vec(), Projection::Degenerate));
    }
    let phi = (dot(g, mean) / (g_norm * m_norm)).clamp(-1.0, 1.0);
    if phi >= phi_goal {
        return Ok((g.to_vec(), Projection::Satisfied));
    }
    let s_goal = (1.0 - phi_goal * phi_goal).sqrt();
    let s_phi = (1.0 - phi * phi).sqrt();
    let coeff = g_norm * (phi_goal * s_phi - phi * s_goal) / (m_norm * s_goal);
    let out = g.iter().zip(mean).map(|(a, m)| a + coeff * m).collect();
    Ok((out, Projection::Projected))
}

#[derive(Clone, Debug)]
pub struct MixProOutput {
    pub batch: GradBatch,
    pub projected: usize,
    /// Set when some row hit the zero-vector case.
    pub degenerate: bool,
}

/// Mixup, then projection of every mixed row against the mean of the
/// original (pre-mixup) gradients.
pub fn mixpro<R: Rng + ?Sized>(
    batch: &GradBatch,
    config: &MixProConfig,
    rng: &mut R,
) -> Result<MixProOutput> {
    config.validate()?;
    let mixed = mixup(batch, config.alpha, rng)?;
    let mean = batch.mean();
    let mut out = Tensor::zeros(batch.len(), batch.grads().cols());
    let mut projected = 0;
    let mut degenerate = false;
    for i in 0..batch.len() {
        let (row, how) = project(mixed.grads().row(i), mean, config.phi_goal)?;
        match how {
            Projection::Projected => projected += 1,
            Projection::Degenerate => degenerate = true,
            Projection::Satisfied => {}
        }
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(MixProOutput {
        batch: GradBatch::new(out),
        projected,
        degenerate,
    })
}

/// Per-row L2 clipping to `clip_norm` followed by N(0, (σ·C)²) noise per coordinate.
pub fn dp_gaussian<R: Rng + ?Sized>(
    batch: &GradBatch,
    config: &DpConfig,
    rng: &mut R,
) -> Result<GradBatch> {
    config.validate()?;
    let std = config.noise_sigma * config.clip_norm;
    let noise = Normal::new(0.0, std).map_err(|e| VflError::invalid(e.to_string()))?;
    let mut out = batch.grads().clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = l2_norm(row);
        if norm > config.clip_norm {
            let s = config.clip_norm / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
        if std > 0.0 {
            row.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
    }
    Ok(GradBatch::new(out))
}

/// Hook applied by the label party to each outgoing gradient batch.
pub trait GradientDefense: Send {
    fn perturb(&mut self, grads: &Tensor) -> Result<Tensor>;

    fn name(&self) -> &'static str;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    #[default]
    None,
    Mixpro(MixProConfig),
    Dp(DpConfig),
}

impl DefenseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::Mixpro(_) => "mixpro",
            DefenseConfig::Dp(_) => "dp",
        }
    }

    pub fn build(&self) -> Result<Box<dyn GradientDefense>> {
        Ok(match *self {
            DefenseConfig::None => Box::new(NoDefense),
            DefenseConfig::Mixpro(c) => Box::new(MixPro::new(c)?),
            DefenseConfig::Dp(c) => Box::new(DpGaussian::new(c)?),
        })
    }
}

pub struct NoDefense;

impl GradientDefense for NoDefense {
    fn perturb(&mut self, grads: &Tensor) -> Result<Tensor> {
        Ok(grads.clone())
    }

    fn name(&self) -> &'static str {
        "none"
    }
}

pub struct MixPro {
    config: MixProConfig,
    rng: ChaCha8Rng,
    pub degenerate_batches: usize,
}

impl MixPro {
    pub fn new(config: MixProConfig) -> Result<Self> {
        config.validate()?;
        Ok(MixPro {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            degenerate_batches: 0,
        })
    }
}

impl GradientDefense for MixPro {
    fn perturb(&mut self, grads: &Tensor) -> Result<Tensor> {
        let out = mixpro(&GradBatch::new(grads.clone()), &self.config, &mut self.rng)?;
        if out.degenerate {
            self.degenerate_batches += 1;
        }
        Ok(out.batch.into_grads())
    }

    fn name(&self) -> &'static str {
        "mixpro"
    }
}

pub struct DpGaussian {
    config: DpConfig,
    rng: ChaCha8Rng,
}

impl DpGaussian {
    pub fn new(config: DpConfig) -> Result<Self> {
        config.validate()?;
        Ok(DpGaussian {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }
}

impl GradientDefense for DpGaussian {
    fn perturb(&mut self, grads: &Tensor) -> Result<Tensor> {
        Ok(dp_gaussian(&GradBatch::new(grads.clone()), &self.config, &mut self.rng)?.into_grads())
    }

    fn name(&self) -> &'static str {
        "dp"
    }
}

/// Wraps a defense and dumps each batch before and after perturbation as
/// line-delimited JSON.
pub struct AuditedDefense<W: Write + Send> {
    inner: Box<dyn GradientDefense>,
    sink: W,
    batch: u64,
}

impl<W: Write + Send> AuditedDefense<W> {
    pub fn new(inner: Box<dyn GradientDefense>, sink: W) -> Self {
        AuditedDefense {
            inner,
            sink,
            batch: 0,
        }
    }

    pub fn into_sink(self) -> W {
        self.sink
    }

    fn dump(&mut self, stage: &str, t: &Tensor) -> Result<()> {
        let rows: Vec<&[f64]> = t.iter_rows().collect();
        let line = serde_json::json!({
            "batch": self.batch,
            "defense": self.inner.name(),
            "stage": stage,
            "rows": rows,
        });
        writeln!(self.sink, "{line}")?;
        Ok(())
    }
}

impl<W: Write + Send> GradientDefense for AuditedDefense<W> {
    fn perturb(&mut self, grads: &Tensor) -> Result<Tensor> {
        self.dump("pre", grads)?;
        let out = self.inner.perturb(grads)?;
        self.dump("post", &out)?;
        self.batch += 1;
        Ok(out)
    }

    fn name(&self) -> &'static str {
        self.inner.name()
    }
}
