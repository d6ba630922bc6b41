//! Training objective and optimisation loop.

mod common;

use r2t_core::autograd::{clip_grad_norm, global_grad_norm, ParamStore, Tape};
use r2t_core::dataset::generate_split;
use r2t_core::io::encode_checkpoint;
use r2t_core::model::{Ctx, Network};
use r2t_core::pipeline::{Pass, PassConfig};
use r2t_core::policy::PolicyKind;
use r2t_core::scene::{generate_scene, Scene, SceneConfig};
use r2t_core::train::{compute_gradients, scene_loss, train_one_seed, Splits, TrainConfig, TrainError};

fn empty_scene() -> Scene {
    let config = SceneConfig {
        n_objects: 0,
        ..SceneConfig::default()
    };
    generate_scene(&config, 1, 0).unwrap()
}

/// Loss terms of a hand-built pass with constant logits and bandwidth term.
fn loss_of(scene: &Scene, logit: f64, l_bw: f64, lambda_bw: f64) -> (f64, f64) {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &store);
    let pass = Pass {
        logits: cx.constant(&[4, 1, 64, 64], vec![logit; 4 * 64 * 64]).unwrap(),
        masks: Vec::new(),
        l_bw: cx.constant(&[], vec![l_bw]).unwrap(),
        l1: None,
        fuse: Vec::new(),
        regions: Vec::new(),
        r2t: Vec::new(),
        link_weights: Vec::new(),
    };
    let terms = scene_loss(&mut cx, &pass, scene, lambda_bw, 1e-4).unwrap();
    (cx.tape.value(terms.loss).item(), cx.tape.value(terms.l_det).item())
}

fn small_data(n: usize) -> Vec<Scene> {
    let splits = Splits {
        train: n,
        val: 0,
        test: 0,
    };
    generate_split(&SceneConfig::default(), &splits, "train", 42).unwrap()
}

fn short_config(epochs: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 1,
        steps_per_epoch: Some(steps),
        ..TrainConfig::default()
    }
}

#[test]
fn saturated_logits_give_near_zero_detection_loss() {
    let (_, l_det) = loss_of(&empty_scene(), -20.0, 0.0, 0.01);
    assert!(l_det < 1e-3, "{l_det}");

    let scene = generate_scene(&SceneConfig::default(), 3, 0).unwrap();
    let logits: Vec<f64> = scene.gt_binary.iter().map(|&b| if b { 20.0 } else { -20.0 }).collect();
    let target: Vec<f64> = scene.gt_binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(r2t_core::autograd::Tensor::new(&[1, 1, 64, 64], logits).unwrap());
    let l = tape.bce_with_logits(x, &target).unwrap();
    assert!(tape.value(l).item() < 1e-3);
}

#[test]
fn zero_transmit_fraction_leaves_only_detection_loss() {
    let (loss, l_det) = loss_of(&empty_scene(), 0.3, 0.0, 0.01);
    assert_eq!(loss, l_det);
}

#[test]
fn loss_grows_with_bandwidth_weight() {
    let scene = empty_scene();
    let losses: Vec<f64> = [0.01, 0.1, 0.5, 1.0].iter().map(|&l| loss_of(&scene, 0.3, 0.25, l).0).collect();
    assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
}

#[test]
fn every_parameter_group_receives_gradient() {
    let (net, mut store) = Network::init::<f32>(3).unwrap();
    let scenes = small_data(2);
    let cfg = TrainConfig::default();
    let groups = ["enc.", "fuse.", "det.", "pol.r2t.", "pol.where2comm.", "pol.ic3net.", "pol.mask."];
    let mut touched = vec![false; groups.len()];
    for (i, policy) in PolicyKind::TRAINED.into_iter().enumerate() {
        let scene = &scenes[i % 2];
        let pass = PassConfig::train(policy, 0.5, 1, scene.scene_id);
        let stats = compute_gradients(&net, &mut store, scene, &scene.observations(), &pass, &cfg).unwrap();
        assert!(stats.loss.is_finite());
        for (g, prefix) in groups.iter().enumerate() {
            touched[g] |= store.ids().any(|id| store.name(id).starts_with(prefix) && store.grad(id).iter().any(|&v| v != 0.0));
        }
        clip_grad_norm(&mut store, 1.0);
        assert!(global_grad_norm(&store) <= 1.0 + 1e-6);
    }
    for (g, prefix) in groups.iter().enumerate() {
        assert!(touched[g], "{prefix} never received a gradient");
    }
}

#[test]
fn overfits_a_small_training_set() {
    let (net, init) = Network::init::<f32>(7).unwrap();
    let scenes = small_data(10);
    let out = train_one_seed(&net, init, &scenes, &[], &short_config(20, 10), 7, |_| {}).unwrap();
    assert_eq!(out.log.len(), 200);
    assert!(out.log.iter().all(|r| r.loss.is_finite() && r.grad_norm.is_finite()));
    // Single steps vary with the drawn scene and policy, so compare windows.
    let mean = |rows: &[r2t_core::train::LogRow]| rows.iter().map(|r| r.l_det).sum::<f64>() / rows.len() as f64;
    let early = mean(&out.log[5..15]);
    let late = mean(&out.log[190..]);
    assert!(late <= 0.5 * early, "L_det {early} -> {late}");
}

#[test]
fn training_is_bit_reproducible() {
    let (net, _) = Network::init::<f32>(9).unwrap();
    let scenes = small_data(4);
    let run = || {
        let (_, init) = Network::init::<f32>(9).unwrap();
        let out = train_one_seed(&net, init, &scenes, &scenes[..1], &short_config(2, 4), 9, |_| {}).unwrap();
        (encode_checkpoint(&out.last), encode_checkpoint(&out.best), out.log)
    };
    let (a_last, a_best, a_log) = run();
    let (b_last, b_best, b_log) = run();
    assert!(a_last == b_last && a_best == b_best);
    assert_eq!(a_log, b_log);
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let (net, mut init) = Network::init::<f32>(9).unwrap();
    let id = init.get("det.deconv2.b").unwrap();
    init.value_mut(id).data_mut()[0] = f32::NAN;
    let scenes = small_data(2);
    match train_one_seed(&net, init, &scenes, &[], &short_config(2, 2), 9, |_| {}) {
        Err(TrainError::NonFinite(dump)) => {
            assert_eq!(dump.step, 0);
            assert!(dump.loss.is_nan());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training should abort"),
    }
}
