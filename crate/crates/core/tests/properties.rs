//! Property tests of the invariants that hold for every input.

mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use r2t_core::autograd::{clip_grad_norm, global_grad_norm, ParamStore, Tape, Tensor};
use r2t_core::channel::{account, LinkBudget};
use r2t_core::eval::{average_precision, summarize, EvalRecord};
use r2t_core::model::{Network, BYTES_PER_REGION, N_REGIONS};
use r2t_core::model::Ctx;
use r2t_core::pipeline::PassConfig;
use r2t_core::policy::{ranking, regions_allowed, top_k, PolicyKind};
use r2t_core::scene::{generate_scene, OcclusionLevel, Scene, SceneConfig};

const BUDGETS: [f64; 6] = [0.0, 1.0 / 64.0, 0.1, 0.5, 0.99, 1.0];

fn network() -> &'static (Network, ParamStore<f32>) {
    static NET: OnceLock<(Network, ParamStore<f32>)> = OnceLock::new();
    NET.get_or_init(|| Network::init::<f32>(77).unwrap())
}

fn scene_at(level: OcclusionLevel, seed: u64, id: u64) -> Scene {
    let config = SceneConfig {
        occlusion_level: level,
        ..SceneConfig::default()
    };
    generate_scene(&config, seed, id).unwrap()
}

fn expected_k(policy: PolicyKind, budget: f64) -> usize {
    match policy {
        PolicyKind::NoComm => 0,
        PolicyKind::Always => N_REGIONS,
        _ => (budget * 64.0).floor().min(64.0) as usize,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 60, ..ProptestConfig::default() })]

    #[test]
    fn budget_law(seed in 0u64..1000, id in 0u64..1000, p in 0usize..10, b in 0usize..6) {
        let policy = PolicyKind::ALL[p];
        let budget = BUDGETS[b];
        let scene = scene_at(OcclusionLevel::Medium, seed, id);
        let (net, store) = network();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, store);
        let pass = net
            .run_scene(&mut cx, &scene, &scene.observations(), &PassConfig::eval(policy, budget, 0.0, seed, id))
            .unwrap();
        let k = expected_k(policy, budget);
        for r in 0..4 {
            let incoming: Vec<_> = (0..4).filter(|&s| s != r).map(|s| pass.masks[s][r].clone().unwrap()).collect();
            for m in &incoming {
                prop_assert_eq!(m.k, k);
                prop_assert_eq!(m.selected.iter().filter(|&&x| x).count(), k);
                prop_assert_eq!(m.bytes, BYTES_PER_REGION * k);
            }
            prop_assert_eq!(account(incoming.iter()), 3 * BYTES_PER_REGION * k);
            if budget == 1.0 && policy != PolicyKind::NoComm {
                prop_assert_eq!(account(incoming.iter()), 24576);
            }
        }
    }

    #[test]
    fn budget_arithmetic(b in 0.0f64..=1.0) {
        let k = regions_allowed(b);
        prop_assert!(k <= 64);
        prop_assert!(k as f64 <= b * 64.0 + 1e-6);
        prop_assert!((k + 1) as f64 > b * 64.0 - 1e-6);
        let link = LinkBudget::new(b);
        prop_assert_eq!(link.bytes_allowed, 128 * k);
    }

    #[test]
    fn line_of_sight_is_symmetric(
        seed in 0u64..500,
        ax in 0i32..64, ay in 0i32..64, bx in 0i32..64, by in 0i32..64,
        fx in 0.0f64..1.0, fy in 0.0f64..1.0,
    ) {
        let s = scene_at(OcclusionLevel::High, seed, 0);
        let a = (ax as f64 + fx * 0.5, ay as f64);
        let b = (bx as f64, by as f64 + fy * 0.5);
        prop_assert_eq!(s.line_of_sight(a, b), s.line_of_sight(b, a));
    }

    #[test]
    fn visible_cells_shrink_with_occlusion(seed in 0u64..10_000, id in 0u64..10_000) {
        let counts: Vec<usize> = OcclusionLevel::ALL
            .iter()
            .map(|&l| {
                let s = scene_at(l, seed, id);
                s.agents.iter().map(|a| s.visibility_map(a).iter().filter(|&&v| v).count()).sum()
            })
            .collect();
        prop_assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{:?}", counts);
    }

    #[test]
    fn observations_are_consistent_with_visibility(seed in 0u64..10_000, id in 0u64..10_000) {
        let s = scene_at(OcclusionLevel::Medium, seed, id);
        for obs in s.observations() {
            for (&d, &v) in obs.detections().iter().zip(obs.visibility()) {
                prop_assert!(v == 0.0 || v == 1.0);
                prop_assert!(d == 0.0 || v == 1.0);
                prop_assert!((0.0..=1.0).contains(&d));
            }
        }
    }

    #[test]
    fn ground_truth_is_thresholded_heatmap(seed in 0u64..10_000, id in 0u64..10_000) {
        let s = scene_at(OcclusionLevel::Low, seed, id);
        prop_assert_eq!(s.objects.len(), 20);
        for (h, b) in s.gt_heatmap.iter().zip(&s.gt_binary) {
            prop_assert_eq!(*b, *h > 0.5);
        }
        for &(x, y) in &s.objects {
            prop_assert_eq!(s.gt_heatmap[y as usize * 64 + x as usize], 1.0);
        }
    }

    #[test]
    fn ranking_is_a_strict_total_order(scores in prop::collection::vec(0u8..4, 64), k in 0usize..=64) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let order = ranking(&scores);
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && a < b));
        }
        let mask = top_k(&scores, k);
        prop_assert_eq!(mask.k, k);
        prop_assert_eq!(mask, top_k(&scores, k));
    }

    #[test]
    fn average_precision_is_a_fraction(
        pred in prop::collection::vec(0.0f64..=1.0, 16),
        gt in prop::collection::vec(any::<bool>(), 16),
    ) {
        let ap = average_precision(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..4)) {
        let n = rows.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[n, 5], rows.concat()).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes(row in prop::collection::vec(-10.0f64..10.0, 8)) {
        let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 8], row).unwrap());
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / 8.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn clipping_caps_the_global_norm(grads in prop::collection::vec(-3.0f64..3.0, 1..20)) {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert_zeros("w", &[grads.len()]).unwrap();
        store.grad_mut(id).copy_from_slice(&grads);
        let before = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        clip_grad_norm(&mut store, 1.0);
        prop_assert!((global_grad_norm(&store) - before.min(1.0)).abs() < 1e-6);
    }

    #[test]
    fn summary_of_identical_records_has_zero_spread(ap in 0.0f64..1.0, n in 1usize..6) {
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord {
                policy: PolicyKind::R2t,
                budget: 0.5,
                kb_label: 12.0,
                bytes: 12288,
                occlusion: OcclusionLevel::Medium,
                drop_rate: 0.0,
                seed: i as u64,
                ap,
            })
            .collect();
        let rows = summarize(&records);
        prop_assert_eq!(rows.len(), 1);
        prop_assert_eq!(rows[0].ap_std, 0.0);
        prop_assert!((rows[0].ap_mean - ap).abs() < 1e-12);
    }
}
