//! Criterion-level checks shared by the topical tests and the acceptance target.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Binomial, DiscreteCDF};

use vflsim::attack::AttackTrace;
use vflsim::defense::{project, Projection};
use vflsim::genmodel::{
    posterior_mean, q_sample, q_step, sample_embedding, train_diffusion, DiffusionConfig, DiffusionData, NoiseSchedule,
};
use vflsim::metrics::{auc, nll};
use vflsim::nn::AdamConfig;
use vflsim::protocol::{
    decode_message, encode_message, BranchKind, Federation, MessageKind, ProtocolMessage, TrainConfig,
};
use vflsim::trainer::{alternative_train, AugmentedUnalignedSet, TrainPlan};
use super::{ids_of, normal_tensor, random_records, rng, tiny_model};

/// Outcome of one criterion.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn normal_vec(n: usize, scale: f64, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

pub struct ProjectionCheck {
    pub projected: usize,
    pub max_cos_err: f64,
    pub gated: usize,
    pub gated_bitwise: bool,
    pub analytic_err: f64,
}

/// Projection on `n` random rows that take the projection branch and `n`
/// that satisfy the gate, plus the 2-D analytic case.
pub fn projection_check(n: usize, seed: u64) -> ProjectionCheck {
    let mut r = rng(seed);
    let mut max_cos_err: f64 = 0.0;
    let mut projected = 0;
    while projected < n {
        let d = r.random_range(2..=32);
        let phi_goal = if r.random::<bool>() {
            3f64.sqrt() / 2.0
        } else {
            r.random_range(-0.95..0.99)
        };
        let mean = normal_vec(d, 10f64.powf(r.random_range(-3.0..2.0)), &mut r);
        let g = normal_vec(d, 10f64.powf(r.random_range(-3.0..2.0)), &mut r);
        if naive_cos(&g, &mean) >= phi_goal {
            continue;
        }
        let (out, how) = project(&g, &mean, phi_goal).unwrap();
        assert_eq!(how, Projection::Projected);
        max_cos_err = max_cos_err.max((naive_cos(&out, &mean) - phi_goal).abs());
        projected += 1;
    }

    let mut gated = 0;
    let mut gated_bitwise = true;
    while gated < n {
        let d = r.random_range(2..=32);
        let phi_goal = r.random_range(-0.95..0.99);
        let mean = normal_vec(d, 1.0, &mut r);
        let noise = normal_vec(d, r.random_range(0.0..2.0), &mut r);
        let g: Vec<f64> = mean.iter().zip(&noise).map(|(m, e)| m + e).collect();
        if naive_cos(&g, &mean) < phi_goal + 1e-12 {
            continue;
        }
        let (out, how) = project(&g, &mean, phi_goal).unwrap();
        gated_bitwise &= how == Projection::Satisfied
            && out.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits());
        gated += 1;
    }

    let phi_goal = 3f64.sqrt() / 2.0;
    let t = 120f64.to_radians();
    let (out, _) = project(&[t.cos(), t.sin()], &[1.0, 0.0], phi_goal).unwrap();
    let analytic_err = (out[0] - 1.5)
        .abs()
        .max((out[1] - phi_goal).abs())
        .max((naive_cos(&out, &[1.0, 0.0]) - phi_goal).abs());
    ProjectionCheck {
        projected,
        max_cos_err,
        gated,
        gated_bitwise,
        analytic_err,
    }
}

pub fn criterion_projection() -> Verdict {
    let c = projection_check(10_000, 3);
    // the inputs cos 120° and sin 120° are themselves rounded
    let pass = c.projected == 10_000 && c.max_cos_err <= 1e-9 && c.gated_bitwise && c.analytic_err <= 4.0 * f64::EPSILON;
    Verdict::new(
        pass,
        format!(
            "{} projected rows, max |cos - phi_goal| = {:.2e}; {} gated rows bitwise: {}; 2-D case error {:.1e}",
            c.projected, c.max_cos_err, c.gated, c.gated_bitwise, c.analytic_err
        ),
    )
}

/// Largest |z| of the sample mean and sample variance of `q_sample` draws
/// against the closed-form marginal, over coordinates and the given steps.
pub fn q_sample_moment_z(schedule: &NoiseSchedule, h0: &[f64], steps: &[usize], draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for &t in steps {
        let (a, v) = (schedule.alpha_bar(t).sqrt(), 1.0 - schedule.alpha_bar(t));
        let samples: Vec<Vec<f64>> = (0..draws).map(|_| q_sample(h0, t, schedule, &mut r).unwrap()).collect();
        let n = draws as f64;
        for (j, &h) in h0.iter().enumerate() {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let z_mean = (mean - a * h) / (v / n).sqrt();
            let z_var = (var - v) / (v * (2.0 / (n - 1.0)).sqrt());
            worst = worst.max(z_mean.abs()).max(z_var.abs());
        }
    }
    worst
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// KS critical value at level 0.001 for sample sizes `n`, `m`.
pub fn ks_critical_001(n: usize, m: usize) -> f64 {
    let c = (-(0.0005f64).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n * m) as f64).sqrt()
}

/// Worst KS ratio (statistic / critical value) between `t` iterated single
/// steps and the closed form, per coordinate, for `t ≤ max_t`.
pub fn iterated_vs_closed_form(schedule: &NoiseSchedule, h0: &[f64], max_t: usize, draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 1..=max_t {
        let closed: Vec<Vec<f64>> = (0..draws).map(|_| q_sample(h0, t, schedule, &mut r).unwrap()).collect();
        let iterated: Vec<Vec<f64>> = (0..draws)
            .map(|_| {
                let mut h = h0.to_vec();
                for s in 1..=t {
                    h = q_step(&h, s, schedule, &mut r).unwrap();
                }
                h
            })
            .collect();
        for j in 0..h0.len() {
            let a: Vec<f64> = closed.iter().map(|s| s[j]).collect();
            let b: Vec<f64> = iterated.iter().map(|s| s[j]).collect();
            worst = worst.max(ks_statistic(&a, &b) / ks_critical_001(draws, draws));
        }
    }
    worst
}

pub struct OverfitCheck {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Per pair, ‖sample − target‖ / ‖target‖.
    pub rel_dist: Vec<f64>,
}

/// Trains on `n_pairs` fixed `(h_N, h_L, y)` triples and samples one
/// embedding per pair's condition.
pub fn diffusion_overfit(n_pairs: usize, train_steps: usize, seed: u64) -> OverfitCheck {
    let mut r = rng(seed);
    let (embed_dim, label_dim) = (8, 16);
    let data = DiffusionData {
        h_n: normal_tensor(n_pairs, embed_dim, 1.0, &mut r),
        h_l: normal_tensor(n_pairs, label_dim, 1.0, &mut r),
        labels: (0..n_pairs).map(|i| (i % 2) as u8).collect(),
    };
    let cfg = DiffusionConfig {
        steps: 200,
        hidden: vec![128, 128],
        train_steps,
        batch_size: 64,
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        seed,
        ..DiffusionConfig::default()
    };
    let fit = train_diffusion(&data, &cfg).unwrap();
    let window = 50.min(train_steps);
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let rel_dist = (0..n_pairs)
        .map(|i| {
            let s = sample_embedding(data.labels[i], data.h_l.row(i), &fit.denoiser, &mut r).unwrap();
            let target = data.h_n.row(i);
            let d: f64 = s.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            d / target.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    OverfitCheck {
        initial_loss: avg(&fit.losses[..window]),
        final_loss: avg(&fit.losses[fit.losses.len() - window..]),
        steps: train_steps,
        rel_dist,
    }
}

pub fn criterion_diffusion() -> Verdict {
    let schedule = NoiseSchedule::with_steps(200).unwrap();
    let h0 = [1.5, -0.7, 0.0, 2.0];
    let z = q_sample_moment_z(&schedule, &h0, &[1, 10, 100, 200], 10_000, 41);

    let mut r = rng(42);
    let z0 = normal_vec(40, 1.0, &mut r);
    let zt = normal_vec(40, 1.0, &mut r);
    let boundary_exact = posterior_mean(&zt, &z0, 1, &schedule).unwrap() == z0;

    let fit = diffusion_overfit(8, 5000, 43);
    let ratio = fit.final_loss / fit.initial_loss;
    let worst = fit.rel_dist.iter().copied().fold(0.0, f64::max);
    let pass = z <= 3.0 && boundary_exact && ratio < 0.1 && worst < 0.2;
    Verdict::new(
        pass,
        format!(
            "q_sample max |z| = {z:.2} (limit 3); posterior mean at t=1 equals z_0 exactly: {boundary_exact}; \
             overfit loss ratio {ratio:.4} after {} steps; worst sample distance {:.3} of target norm",
            fit.steps, worst
        ),
    )
}

/// Exact two-sided binomial interval holding at least `level` mass.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let b = Binomial::new(p, n).unwrap();
    let tail = (1.0 - level) / 2.0;
    let lo = (0..=n).find(|&k| b.cdf(k) > tail).unwrap();
    let hi = (0..=n).find(|&k| b.cdf(k) >= 1.0 - tail).unwrap();
    (lo, hi)
}

/// Aligned-branch count of `iterations` steps of the alternation loop on a
/// tiny model with aligned probability `p`.
pub fn aligned_count(p: f64, iterations: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let aligned = random_records(16, 4, &mut r);
    let mut unaligned_ds = random_records(16, 4, &mut r);
    for (i, rec) in unaligned_ds.records.iter_mut().enumerate() {
        rec.sample_id = format!("u{i:05}");
        rec.nonlabel_features = None;
    }
    let cfg = TrainConfig {
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let mut fed = Federation::new(&aligned.vocab_sizes, &tiny_model(), &cfg).unwrap();
    fed.load(&aligned);
    fed.label.load_samples(&unaligned_ds);
    let cut = fed.label.cut_dim();
    let unaligned = AugmentedUnalignedSet {
        sample_ids: ids_of(&unaligned_ds),
        embeddings: normal_tensor(unaligned_ds.len(), cut, 1.0, &mut r),
        dropped: 0,
    };
    let plan = TrainPlan {
        p,
        iterations: Some(iterations),
        // enough aligned passes that the cap, not the data, ends training
        epochs: iterations,
        batch_size: 8,
        seed,
    };
    let trace = alternative_train(&mut fed, &ids_of(&aligned), &unaligned, &plan).unwrap();
    assert_eq!(trace.branches.len(), iterations);
    trace.branches.iter().filter(|&&b| b == BranchKind::Federated).count()
}

pub fn criterion_sampling() -> Verdict {
    let n = 10_000;
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, p) in [0.1, 0.2, 0.5].into_iter().enumerate() {
        let count = aligned_count(p, n, 100 + k as u64);
        let (lo, hi) = binomial_interval(n as u64, p, 0.999);
        pass &= (lo..=hi).contains(&(count as u64));
        parts.push(format!("p={p}: {count} in [{lo}, {hi}]"));
    }
    Verdict::new(pass, parts.join("; "))
}

/// Pairwise AUC: P(s⁺ > s⁻) + ½·P(s⁺ = s⁻).
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

pub fn direct_nll(probs: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total += if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    total / probs.len() as f64
}

/// Random scores with frequent ties and labels with both classes present.
pub fn random_scored(n: usize, r: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let levels = r.random_range(2..=50);
    let scores = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    (scores, labels)
}

pub fn criterion_metrics() -> Verdict {
    let mut r = rng(6);
    let mut auc_err: f64 = 0.0;
    let mut nll_err: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(2..=200);
        let (scores, labels) = random_scored(n, &mut r);
        auc_err = auc_err.max((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        nll_err = nll_err.max((nll(&probs, &labels).unwrap() - direct_nll(&probs, &labels)).abs());
    }
    let labels = [0u8, 0, 1, 1, 0, 1];
    let ranked = [0.1, 0.2, 0.7, 0.8, 0.3, 0.9];
    let inverted: Vec<f64> = ranked.iter().map(|s| -s).collect();
    let cases = [
        vflsim::attack::leak_auc(&ranked, &labels).unwrap(),
        vflsim::attack::leak_auc(&inverted, &labels).unwrap(),
        vflsim::attack::leak_auc(&[0.4; 6], &labels).unwrap(),
    ];
    let pass = auc_err <= 1e-12 && nll_err <= 1e-12 && cases == [1.0, 0.0, 0.5];
    Verdict::new(
        pass,
        format!(
            "100 instances: max AUC error {auc_err:.1e}, max NLL error {nll_err:.1e}; LeakAUC perfect/inverted/uninformative = {:?}",
            cases
        ),
    )
}

/// Decodes every frame of a full training run plus a prediction pass and
/// checks what crosses the boundary.
pub fn message_audit(seed: u64) -> Verdict {
    let data = vflsim::experiment::split_and_align(&super::small_log(4000, seed), 7, 0.5, seed).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        seed,
        record_trace: true,
        defense: vflsim::defense::DefenseConfig::Mixpro(vflsim::defense::MixProConfig::default()),
        ..TrainConfig::default()
    };
    let model = vflsim::protocol::ModelConfig::default();
    let mut fed = Federation::new(&data.vocab, &model, &cfg).unwrap();
    fed.load(&data.aligned);
    fed.tap_wire();
    let batches = vflsim::protocol::batch_schedule(&ids_of(&data.aligned), cfg.batch_size, cfg.epochs, seed);
    fed.train_batches(&batches).unwrap();
    let training = fed.take_wire();
    vflsim::protocol::predict(&mut fed, &data.test).unwrap();
    let inference = fed.take_wire();

    let mut problems = Vec::new();
    let mut decoded = Vec::new();
    let mut last_seq: [Option<u64>; 2] = [None, None];
    let labels: std::collections::HashMap<&str, &vflsim::data::SampleRecord> = data
        .aligned
        .records
        .iter()
        .chain(&data.test.records)
        .map(|r| (r.sample_id.as_str(), r))
        .collect();
    for (k, frame) in training.iter().chain(&inference).enumerate() {
        let msg = match decode_message(frame) {
            Ok(m) => m,
            Err(e) => {
                problems.push(format!("frame {k}: {e}"));
                continue;
            }
        };
        if encode_message(&msg) != *frame {
            problems.push(format!("frame {k} does not re-encode to the same bytes"));
        }
        // exhaustive: a new field on the message fails to compile here
        let ProtocolMessage {
            kind,
            seq,
            batch_ids,
            dim,
            payload,
        } = &msg;
        if *dim != model.cut_dim() || payload.len() != batch_ids.len() * dim || frame.len() != msg.encoded_len() {
            problems.push(format!("frame {k}: unexpected shape"));
        }
        let dir = *kind as usize;
        if last_seq[dir].is_some_and(|s| *seq <= s) {
            problems.push(format!("frame {k}: seq {seq} not increasing"));
        }
        last_seq[dir] = Some(*seq);
        let expected_kind = if k < training.len() && k % 2 == 1 {
            MessageKind::CutGradientBatch
        } else {
            MessageKind::FederatedEmbeddingBatch
        };
        if *kind != expected_kind {
            problems.push(format!("frame {k}: {kind:?} out of order"));
        }
        // no payload column may reproduce the labels or a raw feature column
        let recs: Vec<&vflsim::data::SampleRecord> = batch_ids.iter().map(|id| labels[id.as_str()]).collect();
        let mut secrets: Vec<Vec<f32>> = vec![recs.iter().map(|r| r.label as f32).collect()];
        for s in 0..vflsim::data::N_LABEL_SLOTS {
            secrets.push(recs.iter().map(|r| r.label_features[s] as f32).collect());
        }
        for s in 0..vflsim::data::N_NONLABEL_SLOTS {
            secrets.push(recs.iter().map(|r| r.nonlabel_features.map_or(f32::NAN, |f| f[s] as f32)).collect());
        }
        for j in 0..*dim {
            let col: Vec<f32> = (0..batch_ids.len()).map(|i| payload[i * dim + j]).collect();
            if secrets.contains(&col) {
                problems.push(format!("frame {k}: column {j} reproduces private data"));
            }
        }
        decoded.push(msg);
    }
    let steps = batches.len();
    if training.len() != 2 * steps {
        problems.push(format!("{} training frames for {steps} steps", training.len()));
    }
    let trace = AttackTrace::from_messages(&decoded);
    if trace != fed.nonlabel.trace {
        problems.push("attack trace differs from the one rebuilt from decoded frames".into());
    }
    let n = training.len() + inference.len();
    if problems.is_empty() {
        Verdict::new(
            true,
            format!("{n} frames decoded ({steps} steps, 1 embedding + 1 gradient each); only ids and {}-wide payloads cross", model.cut_dim()),
        )
    } else {
        Verdict::new(false, format!("{n} frames; {}", problems.join("; ")))
    }
}

/// The tiny fixture config plus `extra` lines.
pub fn tiny_config(extra: &str) -> vflsim::experiment::ExperimentConfig {
    let base = include_str!("../fixtures/tiny.cfg");
    let map = vflsim::experiment::parse_config(&format!("{base}\n{extra}")).unwrap();
    vflsim::experiment::ExperimentConfig::from_map(map).unwrap()
}

/// Report text with the `runtime_s` line removed.
pub fn report_without_runtime(path: &std::path::Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim_start().starts_with("\"runtime_s\""))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs every pipeline (and a defended run) twice in separate directories
/// and compares the written reports and model files byte for byte.
pub fn determinism_check() -> Verdict {
    let runs = [
        "experiment.pipeline = local",
        "experiment.pipeline = vanilla",
        "experiment.pipeline = vanilla\ndefense.kind = mixpro\nexperiment.id = vanilla-mixpro",
        "experiment.pipeline = vanilla\ndefense.kind = dp\ndefense.noise_sigma = 0.1\nexperiment.id = vanilla-dp",
        "experiment.pipeline = heuristic",
        "experiment.pipeline = diffu-at",
    ];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut mismatches = Vec::new();
    for extra in runs {
        let cfg = tiny_config(&format!("experiment.seed = 17\n{extra}"));
        for d in &dirs {
            vflsim::experiment::run_experiment(&cfg, d.path(), vflsim::experiment::RunOptions::default()).unwrap();
        }
        let a = dirs[0].path().join(&cfg.id);
        let b = dirs[1].path().join(&cfg.id);
        if report_without_runtime(&a.join("report.json")) != report_without_runtime(&b.join("report.json")) {
            mismatches.push(format!("{} report", cfg.id));
        }
        for f in ["model.bin", "metrics.jsonl", "synthesized_embeddings.tsv", "denoiser.bin"] {
            let (x, y) = (std::fs::read(a.join(f)).ok(), std::fs::read(b.join(f)).ok());
            if x != y {
                mismatches.push(format!("{} {f}", cfg.id));
            }
        }
    }
    Verdict::new(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} configurations rerun with the same seed: reports identical except runtime_s, artifacts identical", runs.len())
        } else {
            format!("differences: {}", mismatches.join(", "))
        },
    )
}
