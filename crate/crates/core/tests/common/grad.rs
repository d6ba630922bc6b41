//! Finite-difference oracles shared by the gradient tests and the
//! acceptance suite.

use r2t_core::autograd::{ParamStore, Tape, Tensor};
use r2t_core::model::{observation_batch, Ctx, Network};
use r2t_core::pipeline::PassConfig;
use r2t_core::policy::PolicyKind;
use r2t_core::scene::{generate_scene, SceneConfig};
use r2t_core::train::scene_loss;

use super::{gradcheck, random_tensor, rel_err, rng, FD_STEP};

fn push(out: &mut Vec<(String, f64)>, name: &str, err: f64) {
    out.push((name.to_string(), err));
}

/// Worst relative error of every primitive op.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    elementwise_ops(&mut out);
    broadcast_ops(&mut out);
    reductions(&mut out);
    layer_norm(&mut out);
    bce_with_logits(&mut out);
    matrix_ops(&mut out);
    shape_ops(&mut out);
    convolutions(&mut out);
    out
}

fn elementwise_ops(out: &mut Vec<(String, f64)>) {
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[4], 0.05);
    let b = random_tensor(&mut r, &[4], 0.05);
    let ab = [a.clone(), b.clone()];
    push(out, "add", gradcheck(&ab, 2, |t, v| t.add(v[0], v[1])));
    push(out, "sub", gradcheck(&ab, 3, |t, v| t.sub(v[0], v[1])));
    push(out, "mul", gradcheck(&ab, 4, |t, v| t.mul(v[0], v[1])));
    push(out, "scale", gradcheck(&ab[..1], 5, |t, v| t.scale(v[0], -1.7)));
    push(out, "relu", gradcheck(&ab[..1], 6, |t, v| t.relu(v[0])));
    push(out, "sigmoid", gradcheck(&ab[..1], 7, |t, v| t.sigmoid(v[0])));
    push(out, "abs", gradcheck(&ab[..1], 8, |t, v| t.abs(v[0])));
}

fn broadcast_ops(out: &mut Vec<(String, f64)>) {
    let mut r = rng(10);
    let m = random_tensor(&mut r, &[3, 4], 0.05);
    let row = random_tensor(&mut r, &[4], 0.05);
    let col = random_tensor(&mut r, &[3], 0.05);
    push(out, "add_row", gradcheck(&[m.clone(), row], 11, |t, v| t.add_row(v[0], v[1])));
    push(out, "mul_col", gradcheck(&[m, col], 12, |t, v| t.mul_col(v[0], v[1])));
}

fn reductions(out: &mut Vec<(String, f64)>) {
    let mut r = rng(20);
    let x = [random_tensor(&mut r, &[5], 0.05)];
    push(out, "sum", gradcheck(&x, 21, |t, v| t.sum(v[0])));
    push(out, "mean", gradcheck(&x, 22, |t, v| t.mean(v[0])));
    let m = [random_tensor(&mut r, &[2, 5], 0.05)];
    push(out, "softmax", gradcheck(&m, 23, |t, v| t.softmax(v[0])));
}

fn layer_norm(out: &mut Vec<(String, f64)>) {
    let mut r = rng(30);
    let inputs = [
        random_tensor(&mut r, &[3, 4], 0.05),
        random_tensor(&mut r, &[4], 0.05),
        random_tensor(&mut r, &[4], 0.05),
    ];
    push(
        out,
        "layer_norm",
        gradcheck(&inputs, 31, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    );
}

fn bce_with_logits(out: &mut Vec<(String, f64)>) {
    let mut r = rng(40);
    let logits = [random_tensor(&mut r, &[5], 0.05)];
    let target = [0.0, 1.0, 0.3, 0.9, 0.0];
    push(out, "bce", gradcheck(&logits, 41, |t, v| t.bce_with_logits(v[0], &target)));
    let big = [Tensor::new(&[3], vec![25.0, -30.0, 3.0]).unwrap()];
    push(out, "bce_saturated", gradcheck(&big, 42, |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.5])));
}

fn matrix_ops(out: &mut Vec<(String, f64)>) {
    let mut r = rng(50);
    let a = random_tensor(&mut r, &[3, 4], 0.05);
    let b = random_tensor(&mut r, &[4, 5], 0.05);
    let bt = random_tensor(&mut r, &[5, 4], 0.05);
    let bias = random_tensor(&mut r, &[5], 0.05);
    push(out, "matmul", gradcheck(&[a.clone(), b.clone()], 51, |t, v| t.matmul(v[0], v[1])));
    push(out, "matmul_nt", gradcheck(&[a.clone(), bt], 52, |t, v| t.matmul_nt(v[0], v[1])));
    push(out, "linear", gradcheck(&[a.clone(), b, bias], 53, |t, v| t.linear(v[0], v[1], v[2])));
    push(out, "transpose", gradcheck(&[a], 54, |t, v| t.transpose(v[0])));
}

fn shape_ops(out: &mut Vec<(String, f64)>) {
    let mut r = rng(60);
    let a = random_tensor(&mut r, &[3, 4], 0.05);
    let b = random_tensor(&mut r, &[2, 4], 0.05);
    let c = random_tensor(&mut r, &[3, 2], 0.05);
    push(out, "reshape", gradcheck(&[a.clone()], 61, |t, v| t.reshape(v[0], &[2, 6])));
    push(out, "concat0", gradcheck(&[a.clone(), b], 62, |t, v| t.concat(&[v[0], v[1]], 0)));
    push(out, "concat1", gradcheck(&[a.clone(), c], 63, |t, v| t.concat(&[v[0], v[1]], 1)));
    push(out, "slice0", gradcheck(&[a.clone()], 64, |t, v| t.slice(v[0], 0, 1, 2)));
    push(out, "slice1", gradcheck(&[a.clone()], 65, |t, v| t.slice(v[0], 1, 1, 3)));
    push(out, "gather_rows", gradcheck(&[a], 66, |t, v| t.gather_rows(v[0], &[2, 0, 2, 1])));
}

fn convolutions(out: &mut Vec<(String, f64)>) {
    let mut r = rng(70);
    let x = random_tensor(&mut r, &[2, 2, 5, 5], 0.05);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], 0.05);
    let b = random_tensor(&mut r, &[3], 0.05);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let err = gradcheck(&[x.clone(), w.clone(), b.clone()], 71, |t, v| t.conv2d(v[0], v[1], v[2], stride, pad));
        push(out, &format!("conv2d s{stride} p{pad}"), err);
    }
    let xt = random_tensor(&mut r, &[2, 3, 3, 3], 0.05);
    let wt = random_tensor(&mut r, &[3, 2, 3, 3], 0.05);
    let bt = random_tensor(&mut r, &[2], 0.05);
    for (stride, pad, out_pad) in [(2, 1, 1), (1, 1, 0), (2, 0, 0)] {
        let err = gradcheck(&[xt.clone(), wt.clone(), bt.clone()], 72, |t, v| {
            t.conv_transpose2d(v[0], v[1], v[2], stride, pad, out_pad)
        });
        push(out, &format!("conv_transpose2d s{stride} p{pad} op{out_pad}"), err);
    }
}

/// Directional derivative of a scalar function of the parameters, analytic
/// against central differences along the unit direction `dir`.
pub fn directional_check<F>(store: &ParamStore<f64>, dir: &[Vec<f64>], loss: F) -> f64
where
    F: Fn(&mut Ctx<f64>) -> r2t_core::Result<r2t_core::autograd::Var>,
{
    let mut store = store.clone();
    let mut tape = Tape::new();
    let grads = {
        let mut cx = Ctx::new(&mut tape, &store);
        let l = loss(&mut cx).unwrap();
        cx.tape.backward(l).unwrap()
    };
    store.zero_grad();
    store.accumulate(&tape, &grads);
    let ids: Vec<_> = store.ids().collect();
    let analytic: f64 = ids
        .iter()
        .zip(dir)
        .map(|(&id, d)| store.grad(id).iter().zip(d).map(|(g, v)| g * v).sum::<f64>())
        .sum();

    let eval = |shift: f64| -> f64 {
        let mut s = store.clone();
        for (&id, d) in ids.iter().zip(dir) {
            for (p, v) in s.value_mut(id).data_mut().iter_mut().zip(d) {
                *p += shift * v;
            }
        }
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &s);
        let l = loss(&mut cx).unwrap();
        cx.tape.value(l).item()
    };
    let h = FD_STEP;
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    assert!(analytic.abs() > 1e-8, "directional derivative vanished: {analytic:e}");
    rel_err(analytic, numeric)
}

/// Unit direction over the parameters whose names start with `prefix`.
pub fn random_direction(store: &ParamStore<f64>, prefix: &str, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut dir: Vec<Vec<f64>> = store
        .ids()
        .map(|id| {
            let n = store.value(id).numel();
            if store.name(id).starts_with(prefix) {
                random_tensor(&mut r, &[n], 0.0).into_data()
            } else {
                vec![0.0; n]
            }
        })
        .collect();
    let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().flatten().for_each(|v| *v /= norm);
    dir
}

/// Initialized network moved to a generic point: zero-initialized biases
/// put every ReLU of an empty input region exactly on its kink, where
/// finite differences are meaningless.
pub fn generic_network(seed: u64) -> (Network, ParamStore<f64>) {
    let (net, mut store) = Network::init::<f64>(seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let noise = random_tensor(&mut r, &shape, 0.0);
        for (p, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += 0.05 * n;
        }
    }
    (net, store)
}

pub fn test_scene() -> r2t_core::scene::Scene {
    generate_scene(&SceneConfig::default(), 5, 3).unwrap()
}


/// Encoder JVP against central differences along a unit input direction.
pub fn encoder_jvp_error() -> f64 {
    let (net, store) = generic_network(11);
    let mut r = rng(12);
    let x0 = random_tensor(&mut r, &[2, 2, 64, 64], 0.0);
    let w = random_tensor(&mut r, &[2, 32, 8, 8], 0.1);
    let mut v = random_tensor(&mut r, x0.shape(), 0.0);
    let norm = v.data().iter().map(|d| d * d).sum::<f64>().sqrt();
    v.data_mut().iter_mut().for_each(|d| *d /= norm);

    let objective = |x: &Tensor<f64>, grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store);
        let xv = if grad { cx.tape.variable(x.clone()) } else { cx.tape.constant(x.clone()) };
        let out = net.encode(&mut cx, xv).unwrap();
        let wv = cx.tape.constant(w.clone());
        let prod = cx.tape.mul(out, wv).unwrap();
        let s = cx.tape.sum(prod).unwrap();
        let value = cx.tape.value(s).item();
        let g = grad.then(|| cx.tape.backward(s).unwrap().get(xv).unwrap().to_vec());
        (value, g)
    };
    let (_, g) = objective(&x0, true);
    let analytic: f64 = g.unwrap().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    let shifted = |s: f64| {
        let data = x0.data().iter().zip(v.data()).map(|(x, d)| x + s * d).collect();
        objective(&Tensor::new(x0.shape(), data).unwrap(), false).0
    };
    let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
    rel_err(analytic, numeric)
}

/// Detection loss of one agent through encoder and detector, along
/// directions over all, encoder-only and detector-only parameters.
pub fn detect_errors() -> Vec<(String, f64)> {
    let (net, store) = generic_network(13);
    let scene = test_scene();
    let obs = scene.observations();
    let target: Vec<f64> = scene.gt_heatmap.iter().map(|&v| v as f64).collect();
    let loss = |cx: &mut Ctx<f64>| {
        let x = observation_batch::<f64>(&obs[..1])?;
        let x = cx.tape.constant(x);
        let bev = net.encode(cx, x)?;
        let tokens = net.regions(cx, bev, 0)?;
        let logits = net.detect(cx, &[tokens])?;
        cx.tape.bce_with_logits(logits, &target)
    };
    ["", "enc.", "det."]
        .iter()
        .map(|prefix| {
            let dir = random_direction(&store, prefix, 14);
            (format!("detect[{prefix}]"), directional_check(&store, &dir, loss))
        })
        .collect()
}

/// Full training loss of one scene (all four receivers) under `policy`.
pub fn composed_errors(policy: PolicyKind, budget: f64) -> Vec<(String, f64)> {
    let (net, store) = generic_network(21);
    let scene = test_scene();
    let obs = scene.observations();
    let cfg = PassConfig::train(policy, budget, 21, scene.scene_id);
    let loss = |cx: &mut Ctx<f64>| {
        let pass = net.run_scene(cx, &scene, &obs, &cfg)?;
        Ok(scene_loss(cx, &pass, &scene, 0.01, 1e-4)?.loss)
    };
    [("", 22), ("pol.", 23), ("fuse.", 24)]
        .iter()
        .filter(|(prefix, _)| *prefix != "pol." || policy.is_learned())
        .map(|&(prefix, seed)| {
            let dir = random_direction(&store, prefix, seed);
            let err = directional_check(&store, &dir, loss);
            (format!("{}@{budget}[{prefix}]", policy.name()), err)
        })
        .collect()
}
