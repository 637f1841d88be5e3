//! Flat `section.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::defense::{DefenseConfig, DpConfig, MixProConfig};
use crate::error::{Result, VflError};
use crate::genmodel::DiffusionConfig;
use crate::protocol::{ModelConfig, TrainConfig, Transport};
use crate::rng::{derive_seed, streams};

/// Prefix of environment variables that override config keys:
/// `train.batch_size` ← `VFLSIM_TRAIN__BATCH_SIZE`.
pub const ENV_PREFIX: &str = "VFLSIM_";

pub const KNOWN_KEYS: &[&str] = &[
    "experiment.id",
    "experiment.pipeline",
    "experiment.seed",
    "data.dir",
    "data.seed",
    "data.n_samples",
    "data.n_users",
    "data.n_ads",
    "data.positive_rate",
    "data.nonlabel_signal_strength",
    "data.test_days",
    "data.aligned_fraction",
    "model.embedding_dim",
    "model.nonlabel_hidden",
    "model.label_hidden",
    "train.batch_size",
    "train.epochs",
    "train.lr",
    "train.transport",
    "pretrain.epochs",
    "diffu_at.synthesizer",
    "diffu_at.fresh_init",
    "diffusion.steps",
    "diffusion.beta_start",
    "diffusion.beta_end",
    "diffusion.hidden",
    "diffusion.timestep_dim",
    "diffusion.train_steps",
    "diffusion.batch_size",
    "diffusion.lr",
    "defense.kind",
    "defense.alpha",
    "defense.phi_goal",
    "defense.clip_norm",
    "defense.noise_sigma",
    "attack.norm",
    "attack.cluster",
    "report.base",
];

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| VflError::Config(format!("line {}: expected key = value", k + 1)))?;
        let key = key.trim();
        if key.is_empty() || !key.contains('.') {
            return Err(VflError::Config(format!(
                "line {}: key {key:?} needs a section prefix",
                k + 1
            )));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(VflError::Config(format!("line {}: duplicate key {key}", k + 1)));
        }
    }
    Ok(map)
}

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "__").to_uppercase())
}

/// Applies `VFLSIM_*` variables on top of `map`.
pub fn apply_env_overrides(
    map: &mut BTreeMap<String, String>,
    vars: impl IntoIterator<Item = (String, String)>,
) {
    for (name, value) in vars {
        if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
            map.insert(rest.to_lowercase().replace("__", "."), value);
        }
    }
}

fn unknown_keys(map: &BTreeMap<String, String>) -> Vec<String> {
    map.keys()
        .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
        .cloned()
        .collect()
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key} missing from KNOWN_KEYS");
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| VflError::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    fn get_opt(&self, key: &str) -> Option<String> {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key} missing from KNOWN_KEYS");
        self.0.get(key).cloned()
    }

    fn list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.get_opt(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| VflError::Config(format!("{key} = {v:?}: {e}")))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Local,
    Vanilla,
    Heuristic,
    DiffuAt,
}

impl FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "local" => Ok(Pipeline::Local),
            "vanilla" => Ok(Pipeline::Vanilla),
            "heuristic" => Ok(Pipeline::Heuristic),
            "diffu-at" => Ok(Pipeline::DiffuAt),
            other => Err(format!("unknown pipeline {other:?} (local | vanilla | heuristic | diffu-at)")),
        }
    }
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Local => "local",
            Pipeline::Vanilla => "vanilla",
            Pipeline::Heuristic => "heuristic",
            Pipeline::DiffuAt => "diffu-at",
        }
    }
}

fn parse_transport(s: &str) -> Result<Transport> {
    match s {
        "sequential" => Ok(Transport::Sequential),
        "threaded" => Ok(Transport::Threaded),
        other => Err(VflError::Config(format!(
            "train.transport = {other:?}: expected sequential | threaded"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Directory with `aligned.tsv`, `unaligned.tsv`, `test.tsv`; generated when absent.
    pub dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub test_days: i64,
    pub aligned_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSection {
    pub norm: bool,
    pub cluster: bool,
}

/// Everything a run depends on besides the code itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub synthesizer: crate::trainer::SynthesizerKind,
    pub fresh_init: bool,
    pub diffusion: DiffusionConfig,
    pub attacks: AttackSection,
    pub base_report: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Builds a config from parsed keys; unknown keys are reported together.
    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let unknown = unknown_keys(&map);
        if !unknown.is_empty() {
            return Err(VflError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let f = Fields(map);
        let seed: u64 = f.get("experiment.seed", 0)?;
        let pipeline: Pipeline = f.get("experiment.pipeline", Pipeline::Vanilla)?;
        let id = f
            .get_opt("experiment.id")
            .unwrap_or_else(|| format!("{}-seed{seed}", pipeline.as_str()));
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(VflError::Config(format!(
                "experiment.id {id:?} must be non-empty [A-Za-z0-9._-]"
            )));
        }

        let gdef = GeneratorConfig::default();
        let generator = GeneratorConfig {
            n_samples: f.get("data.n_samples", gdef.n_samples)?,
            n_users: f.get("data.n_users", gdef.n_users)?,
            n_ads: f.get("data.n_ads", gdef.n_ads)?,
            positive_rate: f.get("data.positive_rate", gdef.positive_rate)?,
            nonlabel_signal_strength: f.get("data.nonlabel_signal_strength", gdef.nonlabel_signal_strength)?,
            seed: f.get("data.seed", seed)?,
        };
        let data = DataSection {
            dir: f.get_opt("data.dir").map(PathBuf::from),
            generator,
            test_days: f.get("data.test_days", 7)?,
            aligned_fraction: f.get("data.aligned_fraction", 0.2)?,
        };

        let mdef = ModelConfig::default();
        let model = ModelConfig {
            embedding_dim: f.get("model.embedding_dim", mdef.embedding_dim)?,
            nonlabel_hidden: f.list("model.nonlabel_hidden", mdef.nonlabel_hidden)?,
            label_hidden: f.list("model.label_hidden", mdef.label_hidden)?,
        };

        let defense_seed = derive_seed(seed, streams::DEFENSE);
        let kind: String = f.get("defense.kind", "none".to_string())?;
        let mix = MixProConfig::default();
        let defense = match kind.as_str() {
            "none" => DefenseConfig::None,
            "mixpro" => DefenseConfig::Mixpro(MixProConfig {
                alpha: f.get("defense.alpha", mix.alpha)?,
                phi_goal: f.get("defense.phi_goal", mix.phi_goal)?,
                seed: defense_seed,
            }),
            "dp" => DefenseConfig::Dp(DpConfig {
                clip_norm: f.get("defense.clip_norm", 1.0)?,
                noise_sigma: f.get("defense.noise_sigma", 0.1)?,
                seed: defense_seed,
            }),
            other => {
                return Err(VflError::Config(format!(
                    "defense.kind = {other:?}: expected none | mixpro | dp"
                )))
            }
        };
        // a defense is built here only to surface invalid parameters as config errors
        defense.build().map_err(|e| VflError::Config(e.to_string()))?;

        let tdef = TrainConfig::default();
        let mut adam = tdef.adam;
        adam.lr = f.get("train.lr", adam.lr)?;
        let train = TrainConfig {
            batch_size: f.get("train.batch_size", tdef.batch_size)?,
            epochs: f.get("train.epochs", tdef.epochs)?,
            adam,
            seed,
            defense,
            transport: parse_transport(&f.get("train.transport", "sequential".to_string())?)?,
            record_trace: false,
        };
        train.validate()?;

        let ddef = DiffusionConfig::default();
        let mut dadam = ddef.adam;
        dadam.lr = f.get("diffusion.lr", dadam.lr)?;
        let diffusion = DiffusionConfig {
            steps: f.get("diffusion.steps", ddef.steps)?,
            beta_start: f.get("diffusion.beta_start", ddef.beta_start)?,
            beta_end: f.get("diffusion.beta_end", ddef.beta_end)?,
            hidden: f.list("diffusion.hidden", ddef.hidden)?,
            timestep_dim: f.get("diffusion.timestep_dim", ddef.timestep_dim)?,
            train_steps: f.get("diffusion.train_steps", ddef.train_steps)?,
            batch_size: f.get("diffusion.batch_size", ddef.batch_size)?,
            adam: dadam,
            seed,
        };
        diffusion
            .validate()
            .map_err(|e| VflError::Config(e.to_string()))?;

        let synthesizer = match f
            .get("diffu_at.synthesizer", "diffusion".to_string())?
            .as_str()
        {
            "diffusion" => crate::trainer::SynthesizerKind::Diffusion,
            "heuristic" => crate::trainer::SynthesizerKind::Heuristic,
            other => {
                return Err(VflError::Config(format!(
                    "diffu_at.synthesizer = {other:?}: expected diffusion | heuristic"
                )))
            }
        };

        let cfg = ExperimentConfig {
            id,
            pipeline,
            seed,
            data,
            model,
            pretrain_epochs: f.get("pretrain.epochs", train.epochs)?,
            train,
            synthesizer,
            fresh_init: f.get("diffu_at.fresh_init", false)?,
            diffusion,
            attacks: AttackSection {
                norm: f.get("attack.norm", true)?,
                cluster: f.get("attack.cluster", true)?,
            },
            base_report: f.get_opt("report.base").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(parse_config(text)?)
    }

    fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| VflError::Config(e.to_string()))?;
        self.data
            .generator
            .validate()
            .map_err(|e| VflError::Config(e.to_string()))?;
        if !(self.data.aligned_fraction > 0.0 && self.data.aligned_fraction < 1.0) {
            return Err(VflError::Config("data.aligned_fraction must lie in (0, 1)".into()));
        }
        if self.data.test_days < 0 {
            return Err(VflError::Config("data.test_days must be >= 0".into()));
        }
        if self.pretrain_epochs == 0 {
            return Err(VflError::Config("pretrain.epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Re-derives seed-dependent fields after the seed changes (e.g. `--seed`).
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        let mut map = self.to_map();
        map.insert("experiment.seed".into(), seed.to_string());
        if self.data.generator.seed == self.seed {
            map.remove("data.seed");
        }
        if self.id == format!("{}-seed{}", self.pipeline.as_str(), self.seed) {
            map.remove("experiment.id");
        }
        Self::from_map(map)
    }

    /// Inverse of [`ExperimentConfig::from_map`].
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("experiment.id", self.id.clone());
        put("experiment.pipeline", self.pipeline.as_str().into());
        put("experiment.seed", self.seed.to_string());
        if let Some(d) = &self.data.dir {
            put("data.dir", d.display().to_string());
        }
        let g = &self.data.generator;
        put("data.seed", g.seed.to_string());
        put("data.n_samples", g.n_samples.to_string());
        put("data.n_users", g.n_users.to_string());
        put("data.n_ads", g.n_ads.to_string());
        put("data.positive_rate", g.positive_rate.to_string());
        put("data.nonlabel_signal_strength", g.nonlabel_signal_strength.to_string());
        put("data.test_days", self.data.test_days.to_string());
        put("data.aligned_fraction", self.data.aligned_fraction.to_string());
        put("model.embedding_dim", self.model.embedding_dim.to_string());
        put("model.nonlabel_hidden", join(&self.model.nonlabel_hidden));
        put("model.label_hidden", join(&self.model.label_hidden));
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.lr", self.train.adam.lr.to_string());
        let transport = match self.train.transport {
            Transport::Sequential => "sequential",
            Transport::Threaded => "threaded",
        };
        put("train.transport", transport.into());
        put("pretrain.epochs", self.pretrain_epochs.to_string());
        let synth = match self.synthesizer {
            crate::trainer::SynthesizerKind::Diffusion => "diffusion",
            crate::trainer::SynthesizerKind::Heuristic => "heuristic",
        };
        put("diffu_at.synthesizer", synth.into());
        put("diffu_at.fresh_init", self.fresh_init.to_string());
        let d = &self.diffusion;
        put("diffusion.steps", d.steps.to_string());
        put("diffusion.beta_start", d.beta_start.to_string());
        put("diffusion.beta_end", d.beta_end.to_string());
        put("diffusion.hidden", join(&d.hidden));
        put("diffusion.timestep_dim", d.timestep_dim.to_string());
        put("diffusion.train_steps", d.train_steps.to_string());
        put("diffusion.batch_size", d.batch_size.to_string());
        put("diffusion.lr", d.adam.lr.to_string());
        put("defense.kind", self.train.defense.name().into());
        match self.train.defense {
            DefenseConfig::None => {}
            DefenseConfig::Mixpro(c) => {
                put("defense.alpha", c.alpha.to_string());
                put("defense.phi_goal", c.phi_goal.to_string());
            }
            DefenseConfig::Dp(c) => {
                put("defense.clip_norm", c.clip_norm.to_string());
                put("defense.noise_sigma", c.noise_sigma.to_string());
            }
        }
        put("attack.norm", self.attacks.norm.to_string());
        put("attack.cluster", self.attacks.cluster.to_string());
        if let Some(b) = &self.base_report {
            put("report.base", b.display().to_string());
        }
        m
    }

    pub fn to_config_text(&self) -> String {
        self.to_map()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
