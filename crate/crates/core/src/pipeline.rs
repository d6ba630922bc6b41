//! One cooperative-perception pass over a scene: encode every agent,
//! select and deliver regions on all 12 links, fuse per receiver, detect.

use crate::autograd::{Real, Var};
use crate::channel::{deliver, DropConfig};
use crate::error::Result;
use crate::model::{observation_batch, sender_lane, Ctx, FuseOutput, Network, Received, N_AGENTS, N_REGIONS, SENDER_LANES};
use crate::policy::{
    r2t_rank_scores, regions_allowed, select_reactive, top_k, LinkScores, PolicyContext, PolicyKind, SenderScores,
    TransmitMask,
};
use crate::rng::{purpose, RngKey};
use crate::scene::{Observation, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Selected tokens are scaled by the policy's soft weights and the
    /// bandwidth term is differentiable where the policy allows it.
    Train,
    /// Hard selection only; received tokens are unscaled.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct PassConfig {
    pub policy: PolicyKind,
    pub budget: f64,
    pub mode: Mode,
    pub drop: DropConfig,
    /// Root of the random-policy stream for this scene.
    pub policy_key: RngKey,
}

impl PassConfig {
    /// Evaluation pass whose random draws are keyed by `(seed, scene_id)`.
    pub fn eval(policy: PolicyKind, budget: f64, drop_rate: f64, seed: u64, scene_id: u64) -> Self {
        let scene_key = RngKey::new(seed).with(scene_id);
        PassConfig {
            policy,
            budget,
            mode: Mode::Eval,
            drop: DropConfig {
                drop_rate,
                key: scene_key.with(purpose::DROP),
            },
            policy_key: scene_key.with(purpose::RANDOM_POLICY),
        }
    }

    pub fn train(policy: PolicyKind, budget: f64, seed: u64, scene_id: u64) -> Self {
        PassConfig {
            mode: Mode::Train,
            ..PassConfig::eval(policy, budget, 0.0, seed, scene_id)
        }
    }
}

pub struct Pass {
    /// `[4, 1, 64, 64]` logits, one map per receiver.
    pub logits: Var,
    /// `masks[sender][receiver]`; `None` on the diagonal.
    pub masks: Vec<Vec<Option<TransmitMask>>>,
    /// Bandwidth term: mean soft transmit weight or hard fraction.
    pub l_bw: Var,
    /// L1 norm of the mask policy weights when that policy is active.
    pub l1: Option<Var>,
    pub fuse: Vec<FuseOutput>,
    /// Per-receiver region tokens `[64, 32]`.
    pub regions: Vec<Var>,
    /// R2T outputs per `(sender, receiver)` link when that policy is active.
    pub r2t: Vec<((usize, usize), LinkScores)>,
    /// Soft weights per link `[64]` in training mode.
    pub link_weights: Vec<((usize, usize), Var)>,
}

fn values<T: Real>(cx: &Ctx<T>, v: Var) -> Vec<f64> {
    cx.tape.value(v).to_f64()
}

impl Network {
    pub fn run_scene<T: Real>(&self, cx: &mut Ctx<T>, scene: &Scene, obs: &[Observation], cfg: &PassConfig) -> Result<Pass> {
        let x = cx.tape.constant(observation_batch::<T>(obs)?);
        let bev = self.encode(cx, x)?;
        let n = obs.len().min(N_AGENTS);
        let regions = (0..n).map(|i| self.regions(cx, bev, i)).collect::<Result<Vec<_>>>()?;
        let links: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..n).filter(move |&r| r != s).map(move |r| (s, r))).collect();

        let mass = (cfg.policy == PolicyKind::Oracle).then(|| scene.region_mass(8));
        let context = |s: usize, r: usize| {
            let c = PolicyContext::new(&scene.agents, s, r, cfg.budget, cfg.policy_key.with(s as u64));
            match &mass {
                Some(m) => c.with_mass(m.clone()),
                None => c,
            }
        };
        let k = regions_allowed(cfg.budget);
        let train = cfg.mode == Mode::Train;

        let mut masks = vec![vec![None; n]; n];
        let mut link_weights: Vec<((usize, usize), Var)> = Vec::new();
        let mut r2t_out = Vec::new();
        let mut l_bw = None;
        let mut l1 = None;

        match cfg.policy {
            PolicyKind::Where2comm | PolicyKind::Ic3net | PolicyKind::Mask => {
                let mut soft_means = Vec::new();
                for s in 0..n {
                    let SenderScores { scores, weights } = match cfg.policy {
                        PolicyKind::Where2comm => self.where2comm(cx, regions[s])?,
                        PolicyKind::Ic3net => self.ic3net(cx, regions[s])?,
                        _ => self.mask_policy(cx, regions[s])?,
                    };
                    let mask = top_k(&values(cx, scores), k);
                    for r in (0..n).filter(|&r| r != s) {
                        masks[s][r] = Some(mask.clone());
                        if train {
                            link_weights.push(((s, r), weights));
                        }
                    }
                    if cfg.policy == PolicyKind::Mask {
                        soft_means.push(cx.tape.mean(weights)?);
                    }
                }
                if cfg.policy == PolicyKind::Mask {
                    let parts = reshape_scalars(cx, &soft_means)?;
                    let all = cx.tape.concat(&parts, 0)?;
                    l_bw = Some(cx.tape.mean(all)?);
                    l1 = Some(self.mask_l1(cx)?);
                }
            }
            PolicyKind::R2t => {
                let ctxs: Vec<PolicyContext> = links.iter().map(|&(s, r)| context(s, r)).collect();
                let batch: Vec<(Var, &PolicyContext)> =
                    links.iter().zip(&ctxs).map(|(&(s, _), c)| (regions[s], c)).collect();
                let scores = self.r2t(cx, &batch)?;
                let mut p_means = Vec::with_capacity(links.len());
                for (&(s, r), ls) in links.iter().zip(scores) {
                    let rank = r2t_rank_scores(&values(cx, ls.p), &values(cx, ls.s));
                    masks[s][r] = Some(top_k(&rank, k));
                    if train {
                        let sig = cx.tape.sigmoid(ls.s)?;
                        let w = cx.tape.mul(ls.p, sig)?;
                        link_weights.push(((s, r), w));
                    }
                    p_means.push(cx.tape.mean(ls.p)?);
                    r2t_out.push(((s, r), ls));
                }
                let parts = reshape_scalars(cx, &p_means)?;
                let all = cx.tape.concat(&parts, 0)?;
                l_bw = Some(cx.tape.mean(all)?);
            }
            reactive => {
                for s in 0..n {
                    let vals: Vec<f32> = cx.tape.value(regions[s]).to_f32();
                    let mut shared = None;
                    for r in (0..n).filter(|&r| r != s) {
                        let m = match &shared {
                            Some(m) => Clone::clone(m),
                            None => {
                                let m = select_reactive(reactive, &vals, &context(s, r))?.expect("reactive policy");
                                shared = Some(m.clone());
                                m
                            }
                        };
                        masks[s][r] = Some(m);
                    }
                }
            }
        }
        let l_bw = match l_bw {
            Some(v) => v,
            None => {
                let sent: usize = masks.iter().flatten().flatten().map(|m| m.k).sum();
                let frac = sent as f64 / (links.len().max(1) * N_REGIONS) as f64;
                cx.constant(&[], vec![T::from_f64_lossy(frac)])?
            }
        };

        let mut fuse = Vec::with_capacity(n);
        for r in 0..n {
            let mut feats = Vec::new();
            let mut weights = Vec::new();
            let mut slots = Vec::new();
            for s in (0..n).filter(|&s| s != r) {
                let mask = masks[s][r].as_ref().expect("off-diagonal mask");
                let idx: Vec<usize> = deliver(mask, s, r, &cfg.drop).iter().map(|d| d.region).collect();
                if idx.is_empty() {
                    continue;
                }
                let lane = sender_lane(s, r);
                slots.extend(idx.iter().map(|&k| k * SENDER_LANES + lane));
                feats.push(cx.tape.gather_rows(regions[s], &idx)?);
                if let Some(&(_, w)) = link_weights.iter().find(|(l, _)| *l == (s, r)) {
                    let col = cx.tape.reshape(w, &[N_REGIONS, 1])?;
                    weights.push(cx.tape.gather_rows(col, &idx)?);
                }
            }
            let received = if feats.is_empty() {
                None
            } else {
                let features = cx.tape.concat(&feats, 0)?;
                let weights = if weights.is_empty() {
                    None
                } else {
                    let w = cx.tape.concat(&weights, 0)?;
                    Some(cx.tape.reshape(w, &[slots.len()])?)
                };
                Some(Received { features, slots, weights })
            };
            fuse.push(self.fuse(cx, regions[r], received.as_ref())?);
        }
        let fused: Vec<Var> = fuse.iter().map(|f| f.fused).collect();
        let logits = self.detect(cx, &fused)?;
        Ok(Pass {
            logits,
            masks,
            l_bw,
            l1,
            fuse,
            regions,
            r2t: r2t_out,
            link_weights,
        })
    }
}

fn reshape_scalars<T: Real>(cx: &mut Ctx<T>, xs: &[Var]) -> Result<Vec<Var>> {
    xs.iter().map(|&v| cx.tape.reshape(v, &[1])).collect()
}

/// Sigmoid probabilities of each receiver's logits, `[n][64 * 64]`.
pub fn receiver_probabilities<T: Real>(cx: &Ctx<T>, logits: Var) -> Vec<Vec<f64>> {
    let v = cx.tape.value(logits);
    let per = v.shape()[2] * v.shape()[3];
    v.data()
        .chunks(per)
        .map(|c| c.iter().map(|&x| 1.0 / (1.0 + (-x.as_f64()).exp())).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::scene::{generate_scene, SceneConfig};

    fn run(policy: PolicyKind, budget: f64, drop: f64, mode: Mode) -> (Vec<Vec<f64>>, Vec<Vec<Option<TransmitMask>>>) {
        let (net, store) = Network::init::<f32>(3).unwrap();
        let scene = generate_scene(&SceneConfig::default(), 42, 0).unwrap();
        let obs = scene.observations();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store);
        let mut cfg = PassConfig::eval(policy, budget, drop, 42, 0);
        cfg.mode = mode;
        let pass = net.run_scene(&mut cx, &scene, &obs, &cfg).unwrap();
        (receiver_probabilities(&cx, pass.logits), pass.masks)
    }

    #[test]
    fn full_budget_masks_agree_across_policies() {
        let (base, _) = run(PolicyKind::Always, 1.0, 0.0, Mode::Eval);
        for p in PolicyKind::SELECTIVE {
            let (probs, masks) = run(p, 1.0, 0.0, Mode::Eval);
            assert!(masks.iter().flatten().flatten().all(|m| m.k == 64), "{p}");
            assert_eq!(probs, base, "{p}");
        }
    }

    #[test]
    fn total_drop_equals_no_communication() {
        let (none, _) = run(PolicyKind::NoComm, 0.5, 0.0, Mode::Eval);
        for p in [PolicyKind::R2t, PolicyKind::Confidence] {
            let (dropped, _) = run(p, 0.5, 1.0, Mode::Eval);
            assert_eq!(dropped, none);
        }
    }

    #[test]
    fn budget_law_per_link() {
        for p in PolicyKind::SELECTIVE {
            let (_, masks) = run(p, 0.1, 0.0, Mode::Train);
            for m in masks.iter().flatten().flatten() {
                let want = if p == PolicyKind::Always { 64 } else { 6 };
                assert_eq!(m.k, want, "{p}");
            }
        }
    }
}
