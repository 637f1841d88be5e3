mod common;

use common::*;
use vflsim::data::SampleRecord;
use vflsim::defense::{DefenseConfig, DpConfig, GradientDefense};
use vflsim::protocol::{
    batch_schedule, forward_pass, predict, train_vanilla, Federation, ModelConfig, TrainConfig, Transport,
};
use vflsim::Tensor;

#[test]
fn ten_protocol_steps_equal_the_monolith() {
    for seed in [1, 2, 3] {
        let diff = split_vs_monolith(seed, 10, 16);
        assert!(diff < 1e-10, "seed {seed}: {diff:e}");
    }
}

#[test]
fn forward_loss_equals_monolith_loss() {
    let ds = small_log(40, 9);
    let cfg = TrainConfig::default();
    let mut fed = Federation::new(&ds.vocab_sizes, &ModelConfig::default(), &cfg).unwrap();
    fed.load(&ds);
    let mut mono = Monolith::mirror(&fed, &ds.vocab_sizes, cfg.adam);
    let ids = ids_of(&ds);
    let out = forward_pass(&mut fed, &ids).unwrap();
    let refs: Vec<&SampleRecord> = ds.records.iter().collect();
    let m = mono.step(&refs, false);
    assert!((out.loss - m.loss).abs() < 1e-12);
    for (row, mrow) in out.cut_grad.iter_rows().zip(&m.cut_grad) {
        for (a, b) in row.iter().zip(mrow) {
            assert!((*a as f32 as f64 - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn zero_networks_predict_uniformly() {
    let ds = small_log(30, 2);
    let mut fed = Federation::new(&ds.vocab_sizes, &ModelConfig::default(), &TrainConfig::default()).unwrap();
    fed.load(&ds);
    let top = &mut fed.label.federated.top;
    top.weight = Tensor::zeros(2, top.in_dim());
    let out = forward_pass(&mut fed, &ids_of(&ds)).unwrap();
    assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(out.probs.data().iter().all(|&p| p == 0.5));
}

#[test]
fn duplicated_sample_gets_identical_predictions() {
    let ds = small_log(30, 3);
    let mut fed = Federation::new(&ds.vocab_sizes, &ModelConfig::default(), &TrainConfig::default()).unwrap();
    fed.load(&ds);
    let mut ids = ids_of(&ds);
    ids.push(ids[4].clone());
    let out = forward_pass(&mut fed, &ids).unwrap();
    assert_eq!(out.probs.row(4), out.probs.row(ids.len() - 1));
}

#[test]
fn unaligned_sample_is_rejected() {
    let ds = small_log(30, 4);
    let mut fed = Federation::new(&ds.vocab_sizes, &ModelConfig::default(), &TrainConfig::default()).unwrap();
    fed.load(&ds);
    let ids = vec![ds.records[0].sample_id.clone(), "nobody".to_string()];
    assert!(fed.train_step(&ids).is_err());
}

fn trained(transport: Transport, defense: DefenseConfig) -> Federation {
    let ds = small_log(300, 5);
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 2,
        transport,
        defense,
        seed: 8,
        ..TrainConfig::default()
    };
    train_vanilla(&ds, &ds.vocab_sizes, &tiny_model(), &cfg).unwrap()
}

#[test]
fn threaded_transport_is_bitwise_sequential() {
    let dp = DefenseConfig::Dp(DpConfig {
        clip_norm: 1.0,
        noise_sigma: 0.3,
        seed: 2,
    });
    for defense in [DefenseConfig::None, dp] {
        let a = trained(Transport::Sequential, defense);
        let b = trained(Transport::Threaded, defense);
        assert_eq!(federation_params(&a), federation_params(&b));
        assert_eq!(a.label.metrics.len(), b.label.metrics.len());
    }
}

struct Identity;

impl GradientDefense for Identity {
    fn perturb(&mut self, g: &Tensor) -> vflsim::Result<Tensor> {
        Ok(g.clone())
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

#[test]
fn identity_hook_is_neutral() {
    let ds = small_log(200, 6);
    let cfg = TrainConfig {
        batch_size: 25,
        ..TrainConfig::default()
    };
    let base = train_vanilla(&ds, &ds.vocab_sizes, &tiny_model(), &cfg).unwrap();
    let mut hooked = Federation::new(&ds.vocab_sizes, &tiny_model(), &cfg).unwrap();
    hooked.label.set_defense(Box::new(Identity));
    hooked.load(&ds);
    let batches = batch_schedule(&ids_of(&ds), cfg.batch_size, cfg.epochs, cfg.seed);
    hooked.train_batches(&batches).unwrap();
    assert_eq!(federation_params(&base), federation_params(&hooked));
}

#[test]
fn prediction_uses_running_statistics_and_sends_no_gradients() {
    let mut fed = trained(Transport::Sequential, DefenseConfig::None);
    let ds = small_log(120, 7);
    fed.tap_wire();
    let a = predict(&mut fed, &ds).unwrap();
    let frames = fed.take_wire();
    assert!(!frames.is_empty());
    for f in &frames {
        let m = vflsim::protocol::decode_message(f).unwrap();
        assert_eq!(m.kind, vflsim::protocol::MessageKind::FederatedEmbeddingBatch);
    }
    // batch composition does not matter in inference mode
    let b = predict(&mut fed, &ds).unwrap();
    assert_eq!(a, b);
    let half = vflsim::data::Dataset::new(
        ds.records[..7].to_vec(),
        ds.vocab_sizes.clone(),
        vflsim::data::DatasetRole::Test,
    )
    .unwrap();
    assert_eq!(predict(&mut fed, &half).unwrap(), a[..7].to_vec());
}
