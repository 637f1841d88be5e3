//! Experiment orchestration: data preparation, pipelines, attacks and reports.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{cluster_attack, norm_attack};
use crate::data::{
    generate, last_days_cutoff, partition_aligned, psi_intersect, read_tsv, split_by_timestamp,
    write_tsv, Dataset, DatasetRole, VocabSizes,
};
use crate::error::Result;
use crate::genmodel::write_embeddings_tsv;
use crate::metrics::{auc, delta_leak_auc, nll};
use crate::protocol::{predict, train_local, train_vanilla, write_metrics, Federation};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::trainer::{diffu_at, save_model, DiffuAtConfig, Manifest, SynthesizerKind};

pub use config::{
    apply_env_overrides, env_var_name, parse_config, AttackSection, DataSection, ExperimentConfig,
    Pipeline, ENV_PREFIX, KNOWN_KEYS,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// JSON Schema every report validates against.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/experiment_report.schema.json");

pub const ALIGNED_FILE: &str = "aligned.tsv";
pub const UNALIGNED_FILE: &str = "unaligned.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_aligned: usize,
    pub n_unaligned: usize,
    pub n_test: usize,
    pub test_positive_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub auc: f64,
    pub nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyEntry {
    pub leak_auc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_leak_auc: Option<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub aligned_probability: Option<f64>,
    pub dropped_unaligned: Option<usize>,
    pub diffusion_final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment_id: String,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub utility: Utility,
    /// Keyed by attack name.
    pub privacy: BTreeMap<String, PrivacyEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_experiment_id: Option<String>,
    pub training: TrainingSummary,
    pub runtime_s: f64,
}

impl ExperimentReport {
    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Fills `delta_leak_auc` for every attack also present in `base`.
    pub fn reference_base(&mut self, base: &ExperimentReport) -> Result<()> {
        for (name, entry) in &mut self.privacy {
            if let Some(b) = base.privacy.get(name) {
                entry.delta_leak_auc = Some(delta_leak_auc(entry.leak_auc, b.leak_auc)?);
            }
        }
        self.base_experiment_id = Some(base.experiment_id.clone());
        Ok(())
    }
}

/// Train/test material for one run. Vocabulary covers all three sets.
pub struct PreparedData {
    pub aligned: Dataset,
    pub unaligned: Dataset,
    pub test: Dataset,
    pub vocab: VocabSizes,
}

/// Generates (or loads) data, holds out the last `test_days`, and aligns the
/// training part through the simulated PSI.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    if let Some(dir) = &cfg.data.dir {
        return load_prepared(dir);
    }
    let full = generate(&cfg.data.generator)?;
    split_and_align(&full, cfg.data.test_days, cfg.data.aligned_fraction, cfg.seed)
}

pub fn split_and_align(full: &Dataset, test_days: i64, aligned_fraction: f64, seed: u64) -> Result<PreparedData> {
    let (train, test) = split_by_timestamp(full, last_days_cutoff(full, test_days));
    // the publisher's log covers a seeded subset of the platform's clicks
    let (covered, unaligned) = partition_aligned(&train, aligned_fraction, derive_seed(seed, streams::DATA_SPLIT))?;
    let publisher_ids: Vec<String> = covered.records.iter().map(|r| r.sample_id.clone()).collect();
    let platform_ids: Vec<String> = train.records.iter().map(|r| r.sample_id.clone()).collect();
    let salt = derive_seed(seed, streams::DATA_SPLIT).to_le_bytes();
    let matched = psi_intersect(&publisher_ids, &platform_ids, &salt);
    let by_id: HashMap<&str, &crate::data::SampleRecord> =
        covered.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let aligned_records = matched
        .iter()
        .map(|id| (*by_id.get(id.as_str()).expect("intersection is a subset")).clone())
        .collect();
    let aligned = Dataset::new(aligned_records, full.vocab_sizes.clone(), DatasetRole::Aligned)?;
    Ok(PreparedData {
        aligned,
        unaligned,
        test,
        vocab: full.vocab_sizes.clone(),
    })
}

pub fn load_prepared(dir: &Path) -> Result<PreparedData> {
    let aligned = read_tsv(dir.join(ALIGNED_FILE))?;
    let unaligned = read_tsv(dir.join(UNALIGNED_FILE))?;
    let test = read_tsv(dir.join(TEST_FILE))?;
    let vocab = aligned
        .vocab_sizes
        .union(&unaligned.vocab_sizes)
        .union(&test.vocab_sizes);
    Ok(PreparedData {
        aligned,
        unaligned,
        test,
        vocab,
    })
}

pub fn write_prepared(data: &PreparedData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tsv(&data.aligned, dir.join(ALIGNED_FILE))?;
    write_tsv(&data.unaligned, dir.join(UNALIGNED_FILE))?;
    write_tsv(&data.test, dir.join(TEST_FILE))
}

/// What to run besides training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub attacks: bool,
    pub write_artifacts: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            attacks: true,
            write_artifacts: true,
        }
    }
}

fn attack_results(fed: &Federation, aligned: &Dataset, cfg: &ExperimentConfig) -> Result<BTreeMap<String, PrivacyEntry>> {
    let labels: HashMap<String, u8> = aligned
        .records
        .iter()
        .map(|r| (r.sample_id.clone(), r.label))
        .collect();
    let trace = &fed.nonlabel.trace;
    let mut out = BTreeMap::new();
    if cfg.attacks.norm {
        let s = norm_attack(trace)?;
        out.insert(
            "norm".to_string(),
            PrivacyEntry {
                leak_auc: s.leak_auc(&labels)?,
                delta_leak_auc: None,
                n_samples: s.scores.len(),
            },
        );
    }
    if cfg.attacks.cluster {
        // the publisher's own forward pass over its training samples after training
        let ids: Vec<String> = aligned.records.iter().map(|r| r.sample_id.clone()).collect();
        let emb = fed.nonlabel.embeddings(&ids)?;
        let mut rng = stream_rng(cfg.seed, streams::ATTACK);
        let s = cluster_attack(&ids, &emb, &mut rng)?;
        out.insert(
            "cluster".to_string(),
            PrivacyEntry {
                leak_auc: s.leak_auc(&labels)?,
                delta_leak_auc: None,
                n_samples: s.scores.len(),
            },
        );
    }
    Ok(out)
}

/// Runs one experiment. Artifacts go to `out_dir/<experiment_id>/` and a
/// compact line is appended to `out_dir/ledger.jsonl`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<ExperimentReport> {
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    run_on_data(cfg, &data, out_dir, opts, start)
}

pub fn run_on_data(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    out_dir: &Path,
    opts: RunOptions,
    start: Instant,
) -> Result<ExperimentReport> {
    let run_dir = out_dir.join(&cfg.id);
    if opts.write_artifacts {
        fs::create_dir_all(&run_dir)?;
    }
    let want_attacks = opts.attacks && (cfg.attacks.norm || cfg.attacks.cluster);
    let mut train_cfg = cfg.train.clone();
    train_cfg.record_trace = want_attacks;
    let mut manifest = Manifest::new(cfg.seed, serde_json::to_value(cfg)?);

    let y_test = data.test.labels();
    let mut training = TrainingSummary {
        steps: 0,
        final_loss: None,
        aligned_probability: None,
        dropped_unaligned: None,
        diffusion_final_loss: None,
    };
    let mut privacy = BTreeMap::new();
    let probs = match cfg.pipeline {
        Pipeline::Local => {
            let mut local = train_local(&data.aligned, &data.vocab, &cfg.model, &train_cfg)?;
            training.steps = local.label.metrics.len();
            training.final_loss = local.label.metrics.last().map(|m| m.loss);
            if opts.write_artifacts {
                write_metrics(&local.label.metrics, BufWriter::new(File::create(run_dir.join("metrics.jsonl"))?))?;
                manifest.add("metrics", &run_dir, "metrics.jsonl")?;
            }
            local.predict(&data.test)?
        }
        Pipeline::Vanilla => {
            let mut fed = train_vanilla(&data.aligned, &data.vocab, &cfg.model, &train_cfg)?;
            training.steps = fed.label.metrics.len();
            training.final_loss = fed.label.metrics.last().map(|m| m.loss);
            if want_attacks {
                privacy = attack_results(&fed, &data.aligned, cfg)?;
            }
            fed.nonlabel.record_trace = false;
            if opts.write_artifacts {
                write_metrics(&fed.label.metrics, BufWriter::new(File::create(run_dir.join("metrics.jsonl"))?))?;
                manifest.add("metrics", &run_dir, "metrics.jsonl")?;
                save_model(&fed, run_dir.join("model.bin"))?;
                manifest.add("model", &run_dir, "model.bin")?;
            }
            predict(&mut fed, &data.test)?
        }
        Pipeline::Heuristic | Pipeline::DiffuAt => {
            let synthesizer = if cfg.pipeline == Pipeline::Heuristic {
                SynthesizerKind::Heuristic
            } else {
                cfg.synthesizer
            };
            let dcfg = DiffuAtConfig {
                model: cfg.model.clone(),
                pretrain: crate::protocol::TrainConfig {
                    epochs: cfg.pretrain_epochs,
                    ..train_cfg.clone()
                },
                train: train_cfg.clone(),
                diffusion: cfg.diffusion.clone(),
                synthesizer,
                fresh_init: cfg.fresh_init,
                allow_empty_unaligned: false,
            };
            let mut out = diffu_at(&data.aligned, &data.unaligned, &data.vocab, &dcfg, opts.write_artifacts)?;
            let fed = &mut out.federation;
            training.steps = fed.label.metrics.len();
            training.final_loss = fed.label.metrics.last().map(|m| m.loss);
            training.aligned_probability = Some(out.p);
            training.dropped_unaligned = Some(out.augmented.dropped);
            training.diffusion_final_loss = out.diffusion_losses.last().copied();
            if want_attacks {
                privacy = attack_results(fed, &data.aligned, cfg)?;
            }
            fed.nonlabel.record_trace = false;
            if opts.write_artifacts {
                write_metrics(&fed.label.metrics, BufWriter::new(File::create(run_dir.join("metrics.jsonl"))?))?;
                manifest.add("metrics", &run_dir, "metrics.jsonl")?;
                if let Some(pre) = &out.pretrained {
                    save_model(pre, run_dir.join("pretrained.bin"))?;
                    manifest.add("pretrained", &run_dir, "pretrained.bin")?;
                }
                if let Some(den) = &out.denoiser {
                    den.save(run_dir.join("denoiser.bin"))?;
                    manifest.add("denoiser", &run_dir, "denoiser.bin")?;
                }
                write_embeddings_tsv(
                    &out.augmented.sample_ids,
                    &out.augmented.embeddings,
                    BufWriter::new(File::create(run_dir.join("synthesized_embeddings.tsv"))?),
                )?;
                manifest.add("synthesized_embeddings", &run_dir, "synthesized_embeddings.tsv")?;
                save_model(fed, run_dir.join("model.bin"))?;
                manifest.add("model", &run_dir, "model.bin")?;
            }
            predict(fed, &data.test)?
        }
    };

    let mut report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment_id: cfg.id.clone(),
        pipeline: cfg.pipeline,
        seed: cfg.seed,
        config: cfg.clone(),
        dataset: DatasetSummary {
            n_aligned: data.aligned.len(),
            n_unaligned: data.unaligned.len(),
            n_test: data.test.len(),
            test_positive_rate: data.test.positive_rate(),
        },
        utility: Utility {
            auc: auc(&probs, &y_test)?,
            nll: nll(&probs, &y_test)?,
        },
        privacy,
        base_experiment_id: None,
        training,
        runtime_s: 0.0,
    };
    if let Some(base) = &cfg.base_report {
        report.reference_base(&ExperimentReport::load(base)?)?;
    }
    report.runtime_s = start.elapsed().as_secs_f64();

    if opts.write_artifacts {
        fs::write(run_dir.join(REPORT_FILE), report.to_pretty_json()?)?;
        fs::write(run_dir.join("config.txt"), cfg.to_config_text())?;
        manifest.add("config", &run_dir, "config.txt")?;
        manifest.write(run_dir.join("manifest.json"))?;
        append_ledger(out_dir, &report)?;
    }
    Ok(report)
}

pub fn append_ledger(out_dir: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join(LEDGER_FILE))?;
    serde_json::to_writer(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Report path for an experiment under `out_dir`.
pub fn report_path(out_dir: &Path, experiment_id: &str) -> PathBuf {
    out_dir.join(experiment_id).join(REPORT_FILE)
}

/// One line per report: id, pipeline, AUC, NLL, and LeakAUC per attack.
pub fn summary_table(reports: &[ExperimentReport]) -> String {
    let mut s = format!("{:<28} {:<10} {:>8} {:>8}  privacy\n", "experiment", "pipeline", "auc", "nll");
    for r in reports {
        let privacy: Vec<String> = r
            .privacy
            .iter()
            .map(|(k, e)| match e.delta_leak_auc {
                Some(d) => format!("{k}={:.4} ({:+.1}%)", e.leak_auc, 100.0 * d),
                None => format!("{k}={:.4}", e.leak_auc),
            })
            .collect();
        s.push_str(&format!(
            "{:<28} {:<10} {:>8.4} {:>8.4}  {}\n",
            r.experiment_id,
            r.pipeline.as_str(),
            r.utility.auc,
            r.utility.nll,
            privacy.join(" ")
        ));
    }
    s
}

pub fn check_no_runtime_dependence(a: &ExperimentReport, b: &ExperimentReport) -> Result<bool> {
    let strip = |r: &ExperimentReport| -> Result<String> {
        let mut v = serde_json::to_value(r)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("runtime_s");
        }
        Ok(serde_json::to_string(&v)?)
    };
    Ok(strip(a)? == strip(b)?)
}
