mod common;

use common::*;

use vflsim::attack::{norm_attack, AttackTrace};
use vflsim::protocol::{decode_message, Federation, MessageKind, ModelConfig, TrainConfig};

#[test]
fn boundary_carries_only_ids_and_cut_tensors() {
    message_audit(21).assert();
}

#[test]
fn norm_attack_on_decoded_frames_equals_the_recorded_one() {
    let ds = small_log(600, 22);
    let cfg = TrainConfig {
        batch_size: 32,
        seed: 22,
        record_trace: true,
        ..TrainConfig::default()
    };
    let mut fed = Federation::new(&ds.vocab_sizes, &ModelConfig::default(), &cfg).unwrap();
    fed.load(&ds);
    fed.tap_wire();
    let batches = vflsim::protocol::batch_schedule(&ids_of(&ds), 32, 1, 22);
    fed.train_batches(&batches).unwrap();
    let msgs: Vec<_> = fed.take_wire().iter().map(|f| decode_message(f).unwrap()).collect();
    let rebuilt = AttackTrace::from_messages(&msgs);
    assert_eq!(norm_attack(&rebuilt).unwrap(), norm_attack(&fed.nonlabel.trace).unwrap());
    let grads = msgs.iter().filter(|m| m.kind == MessageKind::CutGradientBatch).count();
    assert_eq!(grads, batches.len());
}

#[test]
fn positive_sample_gets_the_largest_gradient_after_one_step() {
    // at an exactly uniform prediction every ‖g‖ is equal; start near the base rate
    let ds = small_log(64, 23);
    let cfg = TrainConfig {
        batch_size: 64,
        record_trace: true,
        ..TrainConfig::default()
    };
    let mut fed = Federation::new(&ds.vocab_sizes, &ModelConfig::default(), &cfg).unwrap();
    let top = &mut fed.label.federated.top;
    top.weight.scale_in_place(1e-4);
    let rate = ds.positive_rate();
    top.bias = vflsim::Tensor::from_vec(2, 1, vec![0.0, (rate / (1.0 - rate)).ln()]).unwrap();
    fed.load(&ds);
    fed.train_step(&ids_of(&ds)).unwrap();
    let scores = norm_attack(&fed.nonlabel.trace).unwrap();
    let labels = ds.labels();
    assert!(rate < 0.5);
    let max_neg = scores.scores.iter().zip(&labels).filter(|p| *p.1 == 0).map(|p| *p.0).fold(0.0, f64::max);
    let min_pos = scores.scores.iter().zip(&labels).filter(|p| *p.1 == 1).map(|p| *p.0).fold(f64::MAX, f64::min);
    assert!(min_pos > max_neg);
}
