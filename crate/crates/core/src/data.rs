//! Feature-partitioned CVR samples: a synthetic generator, TSV I/O,
//! simulated PSI alignment and train/test/aligned splits.
//!
//! Every record has 7 categorical slots owned by the non-label party and 16
//! owned by the label party. Labels come from a latent logistic model over
//! per-ID weights on both parties' slots, so the non-label party's
//! contribution to predictability is controlled by
//! [`GeneratorConfig::nonlabel_signal_strength`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VflError};

pub const N_NONLABEL_SLOTS: usize = 7;
pub const N_LABEL_SLOTS: usize = 16;

/// Column order of the TSV header.
pub fn tsv_header() -> String {
    let mut cols = vec!["sample_id".to_string(), "user_id".to_string()];
    cols.extend((0..N_NONLABEL_SLOTS).map(|i| format!("n{i}")));
    cols.extend((0..N_LABEL_SLOTS).map(|i| format!("l{i}")));
    cols.extend(["label", "click_ts", "conv_ts"].map(String::from));
    cols.join("\t")
}

const N_COLUMNS: usize = 2 + N_NONLABEL_SLOTS + N_LABEL_SLOTS + 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub user_id: u32,
    /// `None` once the non-label party's features have been erased.
    pub nonlabel_features: Option<[u32; N_NONLABEL_SLOTS]>,
    pub label_features: [u32; N_LABEL_SLOTS],
    pub label: u8,
    pub click_ts: i64,
    pub conv_ts: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Aligned,
    UnalignedLabelOnly,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub nonlabel: Vec<usize>,
    pub label: Vec<usize>,
}

impl VocabSizes {
    /// Element-wise maximum, so both datasets index into one table layout.
    pub fn union(&self, other: &VocabSizes) -> VocabSizes {
        let m = |a: &[usize], b: &[usize]| a.iter().zip(b).map(|(x, y)| *x.max(y)).collect();
        VocabSizes {
            nonlabel: m(&self.nonlabel, &other.nonlabel),
            label: m(&self.label, &other.label),
        }
    }

    fn covers(&self, r: &SampleRecord) -> bool {
        let nl_ok = r.nonlabel_features.is_none_or(|f| {
            f.iter()
                .zip(&self.nonlabel)
                .all(|(&id, &v)| (id as usize) < v)
        });
        nl_ok
            && r.label_features
                .iter()
                .zip(&self.label)
                .all(|(&id, &v)| (id as usize) < v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub vocab_sizes: VocabSizes,
    pub role: DatasetRole,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, vocab_sizes: VocabSizes, role: DatasetRole) -> Result<Self> {
        let ds = Dataset {
            records,
            vocab_sizes,
            role,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        let pos = self.records.iter().filter(|r| r.label == 1).count();
        pos as f64 / self.records.len().max(1) as f64
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Schema checks: slot counts are fixed by the record type; this verifies
    /// labels, conversion timestamps, vocab coverage and role-specific erasure.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.nonlabel.len() != N_NONLABEL_SLOTS
            || self.vocab_sizes.label.len() != N_LABEL_SLOTS
        {
            return Err(VflError::invalid("vocab sizes must list 7 + 16 slots"));
        }
        for r in &self.records {
            if r.label > 1 {
                return Err(VflError::invalid(format!("{}: label {}", r.sample_id, r.label)));
            }
            if r.label == 1 && r.conv_ts < r.click_ts {
                return Err(VflError::invalid(format!(
                    "{}: conversion precedes click",
                    r.sample_id
                )));
            }
            if !self.vocab_sizes.covers(r) {
                return Err(VflError::invalid(format!(
                    "{}: feature ID outside vocabulary",
                    r.sample_id
                )));
            }
            if self.role == DatasetRole::UnalignedLabelOnly && r.nonlabel_features.is_some() {
                return Err(VflError::invalid(format!(
                    "{}: unaligned record exposes non-label features",
                    r.sample_id
                )));
            }
        }
        Ok(())
    }

    fn inferred_vocab(records: &[SampleRecord]) -> VocabSizes {
        let mut v = VocabSizes {
            nonlabel: vec![1; N_NONLABEL_SLOTS],
            label: vec![1; N_LABEL_SLOTS],
        };
        for r in records {
            if let Some(f) = r.nonlabel_features {
                for (s, &id) in f.iter().enumerate() {
                    v.nonlabel[s] = v.nonlabel[s].max(id as usize + 1);
                }
            }
            for (s, &id) in r.label_features.iter().enumerate() {
                v.label[s] = v.label[s].max(id as usize + 1);
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub n_users: usize,
    pub n_ads: usize,
    pub positive_rate: f64,
    pub nonlabel_signal_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_samples: 100_000,
            n_users: 5_000,
            n_ads: 500,
            positive_rate: 0.05,
            nonlabel_signal_strength: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Conversion rate of the production log the schema is modeled on.
    pub const PAPER_SCALE_POSITIVE_RATE: f64 = 0.006;

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_ads == 0 {
            return Err(VflError::invalid("n_users and n_ads must be positive"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(VflError::invalid("positive_rate must lie in (0, 1)"));
        }
        if !(self.nonlabel_signal_strength >= 0.0 && self.nonlabel_signal_strength.is_finite()) {
            return Err(VflError::invalid("nonlabel_signal_strength must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Number of latent user segments; segments tie label-side user attributes to
/// publisher-side interests so the two parties' features are correlated.
const N_SEGMENTS: usize = 32;
const NONLABEL_VOCAB: [usize; N_NONLABEL_SLOTS] = [24, 48, 32, 64, 12, 40, 16];
/// Label slots: 5 user attributes, 5 ad attributes, 6 per-click context slots.
const USER_ATTR_VOCAB: [usize; 5] = [8, 3, 50, 10, 5];
const AD_ATTR_VOCAB_TAIL: [usize; 4] = [30, 200, 10, 100];
const CONTEXT_VOCAB: [usize; 6] = [24, 7, 10, 5, 8, 4];
const SECONDS_PER_DAY: i64 = 86_400;
const SPAN_DAYS: i64 = 14;

/// Scale of the label-side latent logit.
const LABEL_LOGIT_SCALE: f64 = 0.9;
/// Probability that a click uses the user's preferred publisher-side ID.
const NONLABEL_STICKINESS: f64 = 0.8;
/// Probability that a user's preferred publisher-side ID follows its segment.
const SEGMENT_AFFINITY: f64 = 0.7;

fn label_vocab(n_ads: usize) -> Vec<usize> {
    let mut v = USER_ATTR_VOCAB.to_vec();
    v.push(n_ads);
    v.extend_from_slice(&AD_ATTR_VOCAB_TAIL);
    v.extend_from_slice(&CONTEXT_VOCAB);
    v
}

struct UserProfile {
    attrs: [u32; 5],
    preferred: [u32; N_NONLABEL_SLOTS],
}

/// Draws latent weights for one slot, N(0, 1) each.
fn slot_weights(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..vocab).map(|_| normal.sample(rng)).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let label_vocab = label_vocab(config.n_ads);
    let vocab = VocabSizes {
        nonlabel: NONLABEL_VOCAB.to_vec(),
        label: label_vocab.clone(),
    };

    // segment-level anchors for both parties' user-side features
    let seg_attrs: Vec<[u32; 5]> = (0..N_SEGMENTS)
        .map(|_| std::array::from_fn(|s| rng.random_range(0..USER_ATTR_VOCAB[s] as u32)))
        .collect();
    let seg_pref: Vec<[u32; N_NONLABEL_SLOTS]> = (0..N_SEGMENTS)
        .map(|_| std::array::from_fn(|s| rng.random_range(0..NONLABEL_VOCAB[s] as u32)))
        .collect();

    let users: Vec<UserProfile> = (0..config.n_users)
        .map(|_| {
            let seg = rng.random_range(0..N_SEGMENTS);
            let attrs = std::array::from_fn(|s| {
                if rng.random_bool(SEGMENT_AFFINITY) {
                    seg_attrs[seg][s]
                } else {
                    rng.random_range(0..USER_ATTR_VOCAB[s] as u32)
                }
            });
            let preferred = std::array::from_fn(|s| {
                if rng.random_bool(SEGMENT_AFFINITY) {
                    seg_pref[seg][s]
                } else {
                    rng.random_range(0..NONLABEL_VOCAB[s] as u32)
                }
            });
            UserProfile { attrs, preferred }
        })
        .collect();

    let ads: Vec<[u32; 4]> = (0..config.n_ads)
        .map(|_| std::array::from_fn(|s| rng.random_range(0..AD_ATTR_VOCAB_TAIL[s] as u32)))
        .collect();

    // Each party's latent logit is normalized to unit variance over slots.
    let label_w: Vec<Vec<f64>> = label_vocab.iter().map(|&v| slot_weights(&mut rng, v)).collect();
    let nonlabel_w: Vec<Vec<f64>> = NONLABEL_VOCAB
        .iter()
        .map(|&v| slot_weights(&mut rng, v))
        .collect();
    let label_norm = LABEL_LOGIT_SCALE / (N_LABEL_SLOTS as f64).sqrt();
    let nonlabel_norm = config.nonlabel_signal_strength / (N_NONLABEL_SLOTS as f64).sqrt();

    let mut records = Vec::with_capacity(config.n_samples);
    let mut logits = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let user_id = rng.random_range(0..config.n_users);
        let ad = rng.random_range(0..config.n_ads);
        let u = &users[user_id];
        let mut lf = [0u32; N_LABEL_SLOTS];
        lf[..5].copy_from_slice(&u.attrs);
        lf[5] = ad as u32;
        lf[6..10].copy_from_slice(&ads[ad]);
        for (k, &v) in CONTEXT_VOCAB.iter().enumerate() {
            lf[10 + k] = rng.random_range(0..v as u32);
        }
        let nf: [u32; N_NONLABEL_SLOTS] = std::array::from_fn(|s| {
            if rng.random_bool(NONLABEL_STICKINESS) {
                u.preferred[s]
            } else {
                rng.random_range(0..NONLABEL_VOCAB[s] as u32)
            }
        });
        let z_label: f64 = lf
            .iter()
            .enumerate()
            .map(|(s, &id)| label_w[s][id as usize])
            .sum::<f64>()
            * label_norm;
        let z_nonlabel: f64 = nf
            .iter()
            .enumerate()
            .map(|(s, &id)| nonlabel_w[s][id as usize])
            .sum::<f64>()
            * nonlabel_norm;
        logits.push(z_label + z_nonlabel);
        records.push(SampleRecord {
            sample_id: format!("s{i:08}"),
            user_id: user_id as u32,
            nonlabel_features: Some(nf),
            label_features: lf,
            label: 0,
            click_ts: rng.random_range(0..SPAN_DAYS * SECONDS_PER_DAY),
            conv_ts: 0,
        });
    }

    let bias = calibrate_bias(&logits, config.positive_rate);
    let delay = Exp::new(1.0 / (2.0 * SECONDS_PER_DAY as f64)).expect("positive rate");
    for (r, z) in records.iter_mut().zip(&logits) {
        if rng.random_bool(sigmoid(z + bias)) {
            r.label = 1;
            r.conv_ts = r.click_ts + delay.sample(&mut rng) as i64;
        }
    }
    Dataset::new(records, vocab, DatasetRole::Aligned)
}

/// Bisection on the intercept so the expected positive rate matches `target`.
fn calibrate_bias(logits: &[f64], target: f64) -> f64 {
    if logits.is_empty() {
        return (target / (1.0 - target)).ln();
    }
    let rate = |b: f64| logits.iter().map(|z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn write_tsv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tsv_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_tsv_to<W: Write>(dataset: &Dataset, w: &mut W) -> Result<()> {
    writeln!(w, "{}", tsv_header())?;
    for r in &dataset.records {
        write!(w, "{}\t{}", r.sample_id, r.user_id)?;
        match r.nonlabel_features {
            Some(f) => f.iter().try_for_each(|v| write!(w, "\t{v}"))?,
            None => (0..N_NONLABEL_SLOTS).try_for_each(|_| write!(w, "\t"))?,
        }
        r.label_features.iter().try_for_each(|v| write!(w, "\t{v}"))?;
        writeln!(w, "\t{}\t{}\t{}", r.label, r.click_ts, r.conv_ts)?;
    }
    Ok(())
}

/// Reads a TSV file. Vocab sizes are inferred from the IDs present; the role
/// is `UnalignedLabelOnly` when every record is erased, `Aligned` otherwise.
pub fn read_tsv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_tsv_from(BufReader::new(File::open(path)?))
}

pub fn read_tsv_from<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end_matches('\r') != tsv_header() {
        return Err(VflError::Parse {
            line: 1,
            msg: "unexpected header".into(),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        records.push(parse_row(line.trim_end_matches('\r'), lineno)?);
    }
    let vocab = Dataset::inferred_vocab(&records);
    let role = if !records.is_empty() && records.iter().all(|r| r.nonlabel_features.is_none()) {
        DatasetRole::UnalignedLabelOnly
    } else {
        DatasetRole::Aligned
    };
    let ds = Dataset {
        records,
        vocab_sizes: vocab,
        role,
    };
    ds.validate().map_err(|e| VflError::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(ds)
}

fn parse_row(line: &str, lineno: usize) -> Result<SampleRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != N_COLUMNS {
        return Err(VflError::Parse {
            line: lineno,
            msg: format!("expected {N_COLUMNS} columns, found {}", cols.len()),
        });
    }
    let err = |what: &str, v: &str| VflError::Parse {
        line: lineno,
        msg: format!("bad {what} {v:?}"),
    };
    let num = |what: &str, v: &str| v.parse::<u32>().map_err(|_| err(what, v));

    let nl = &cols[2..2 + N_NONLABEL_SLOTS];
    let nonlabel_features = if nl.iter().all(|c| c.is_empty()) {
        None
    } else {
        let mut f = [0u32; N_NONLABEL_SLOTS];
        for (s, c) in nl.iter().enumerate() {
            f[s] = num("non-label feature", c)?;
        }
        Some(f)
    };
    let mut label_features = [0u32; N_LABEL_SLOTS];
    for (s, c) in cols[2 + N_NONLABEL_SLOTS..2 + N_NONLABEL_SLOTS + N_LABEL_SLOTS]
        .iter()
        .enumerate()
    {
        label_features[s] = num("label feature", c)?;
    }
    let tail = &cols[N_COLUMNS - 3..];
    let label: u8 = match tail[0] {
        "0" => 0,
        "1" => 1,
        v => return Err(err("label", v)),
    };
    let click_ts = tail[1].parse().map_err(|_| err("click_ts", tail[1]))?;
    let conv_ts = tail[2].parse().map_err(|_| err("conv_ts", tail[2]))?;
    if cols[0].is_empty() {
        return Err(err("sample_id", cols[0]));
    }
    Ok(SampleRecord {
        sample_id: cols[0].to_string(),
        user_id: num("user_id", cols[1])?,
        nonlabel_features,
        label_features,
        label,
        click_ts,
        conv_ts,
    })
}

/// One side of the simulated PSI: exposes only salted 64-bit hashes of its IDs.
pub struct PsiParty {
    salt: Vec<u8>,
}

impl PsiParty {
    pub fn new(salt: &[u8]) -> Self {
        PsiParty {
            salt: salt.to_vec(),
        }
    }

    pub fn blind_one(&self, id: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(&self.salt);
        h.update(id.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn blind(&self, ids: &[String]) -> Vec<u64> {
        ids.iter().map(|id| self.blind_one(id)).collect()
    }
}

/// Matcher step: intersects two sets of blinded IDs, sorted ascending.
pub fn match_blinded(a: &[u64], b: &[u64]) -> Vec<u64> {
    let bs: HashSet<u64> = b.iter().copied().collect();
    let mut out: Vec<u64> = a.iter().copied().filter(|h| bs.contains(h)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Aligned IDs, ordered by salted hash. Both sides share a salt the matcher
/// does not see; each side maps matched hashes back to its own IDs.
pub fn psi_intersect(ids_n: &[String], ids_l: &[String], salt: &[u8]) -> Vec<String> {
    let party = PsiParty::new(salt);
    let hn = party.blind(ids_n);
    let hl = party.blind(ids_l);
    let matched = match_blinded(&hn, &hl);
    let lookup: HashMap<u64, &String> = hl.iter().copied().zip(ids_l).collect();
    matched.iter().map(|h| lookup[h].clone()).collect()
}

/// Click time strictly before `cutoff_ts` goes to train; the rest to test.
pub fn split_by_timestamp(dataset: &Dataset, cutoff_ts: i64) -> (Dataset, Dataset) {
    let (train, test): (Vec<_>, Vec<_>) = dataset
        .records
        .iter()
        .cloned()
        .partition(|r| r.click_ts < cutoff_ts);
    (
        Dataset {
            records: train,
            vocab_sizes: dataset.vocab_sizes.clone(),
            role: dataset.role,
        },
        Dataset {
            records: test,
            vocab_sizes: dataset.vocab_sizes.clone(),
            role: DatasetRole::Test,
        },
    )
}

/// Cutoff that holds out the final `days` days of clicks.
pub fn last_days_cutoff(dataset: &Dataset, days: i64) -> i64 {
    let max_ts = dataset.records.iter().map(|r| r.click_ts).max().unwrap_or(0);
    max_ts - days * SECONDS_PER_DAY + 1
}

/// Seeded split into an aligned part and an unaligned part whose non-label
/// features are erased.
pub fn partition_aligned(train: &Dataset, aligned_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(aligned_fraction > 0.0 && aligned_fraction < 1.0) {
        return Err(VflError::invalid("aligned_fraction must lie in (0, 1)"));
    }
    let n = train.len();
    let n_aligned = (aligned_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, u) = idx.split_at(n_aligned);
    let mut a = a.to_vec();
    let mut u = u.to_vec();
    a.sort_unstable();
    u.sort_unstable();
    let aligned = a.iter().map(|&i| train.records[i].clone()).collect();
    let unaligned = u
        .iter()
        .map(|&i| {
            let mut r = train.records[i].clone();
            r.nonlabel_features = None;
            r
        })
        .collect();
    Ok((
        Dataset::new(aligned, train.vocab_sizes.clone(), DatasetRole::Aligned)?,
        Dataset::new(unaligned, train.vocab_sizes.clone(), DatasetRole::UnalignedLabelOnly)?,
    ))
}

/// Counts of records per user, keyed for deterministic iteration.
pub fn user_counts(dataset: &Dataset) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for r in &dataset.records {
        *m.entry(r.user_id).or_insert(0) += 1;
    }
    m
}
