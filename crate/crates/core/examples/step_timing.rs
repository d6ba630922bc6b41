//! Times forward/backward training steps for each trained policy.

use std::time::Instant;

use r2t_core::model::Network;
use r2t_core::pipeline::PassConfig;
use r2t_core::policy::PolicyKind;
use r2t_core::scene::{generate_scene, SceneConfig};
use r2t_core::train::{compute_gradients, TrainConfig};

fn main() {
    let (net, mut store) = Network::init::<f32>(1).unwrap();
    let scene = generate_scene(&SceneConfig::default(), 42, 0).unwrap();
    let obs = scene.observations();
    let cfg = TrainConfig::default();
    for policy in PolicyKind::TRAINED {
        let pass = PassConfig::train(policy, 0.5, 1, 0);
        let reps = 20;
        let t = Instant::now();
        for _ in 0..reps {
            compute_gradients(&net, &mut store, &scene, &obs, &pass, &cfg).unwrap();
        }
        println!("{policy:>10}: {:.1} ms/step", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    let t = Instant::now();
    for _ in 0..20 {
        let _ = r2t_core::eval::scene_ap(&net, &store, &scene, &PassConfig::eval(PolicyKind::R2t, 0.5, 0.0, 1, 0)).unwrap();
    }
    println!("eval r2t: {:.1} ms/scene", t.elapsed().as_secs_f64() * 1e3 / 20.0);
}
