//! Transmit-selection policies.
//!
//! Every policy maps a sender's 64 region tokens and a [`PolicyContext`] to
//! a per-link [`TransmitMask`]. Scoring policies rank regions by
//! `(score desc, index asc)` and keep the top `floor(B * 64)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Var};
use crate::error::{Error, Result};
use crate::model::{Ctx, Network, BYTES_PER_REGION, FEAT_DIM, N_REGIONS, R2T_DIM, R2T_HEADS, R2T_TOKENS};
use crate::rng::RngKey;
use crate::scene::AgentPose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    NoComm,
    Always,
    Random,
    Confidence,
    Uncertainty,
    Where2comm,
    Ic3net,
    Mask,
    Oracle,
    R2t,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 10] = [
        PolicyKind::NoComm,
        PolicyKind::Always,
        PolicyKind::Random,
        PolicyKind::Confidence,
        PolicyKind::Uncertainty,
        PolicyKind::Where2comm,
        PolicyKind::Ic3net,
        PolicyKind::Mask,
        PolicyKind::Oracle,
        PolicyKind::R2t,
    ];

    /// Policies sampled during training.
    pub const TRAINED: [PolicyKind; 5] = [
        PolicyKind::R2t,
        PolicyKind::Where2comm,
        PolicyKind::Ic3net,
        PolicyKind::Mask,
        PolicyKind::Always,
    ];

    /// Every policy that transmits anything.
    pub const SELECTIVE: [PolicyKind; 9] = [
        PolicyKind::Always,
        PolicyKind::Random,
        PolicyKind::Confidence,
        PolicyKind::Uncertainty,
        PolicyKind::Where2comm,
        PolicyKind::Ic3net,
        PolicyKind::Mask,
        PolicyKind::Oracle,
        PolicyKind::R2t,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::NoComm => "nocomm",
            PolicyKind::Always => "always",
            PolicyKind::Random => "random",
            PolicyKind::Confidence => "confidence",
            PolicyKind::Uncertainty => "uncertainty",
            PolicyKind::Where2comm => "where2comm",
            PolicyKind::Ic3net => "ic3net",
            PolicyKind::Mask => "mask",
            PolicyKind::Oracle => "oracle",
            PolicyKind::R2t => "r2t",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, PolicyKind::Where2comm | PolicyKind::Ic3net | PolicyKind::Mask | PolicyKind::R2t)
    }

    /// Selection depends on the receiver (only R2T sees the receiver id).
    pub fn per_receiver(self) -> bool {
        self == PolicyKind::R2t
    }

    pub fn valid_names() -> String {
        PolicyKind::ALL.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}; valid policies: {}", PolicyKind::valid_names())))
    }
}

/// Number of regions a budget fraction allows per link.
pub fn regions_allowed(budget: f64) -> usize {
    ((budget.clamp(0.0, 1.0) * N_REGIONS as f64 + 1e-9).floor() as usize).min(N_REGIONS)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransmitMask {
    pub selected: Vec<bool>,
    pub k: usize,
    pub bytes: usize,
}

impl TransmitMask {
    pub fn from_selected(selected: Vec<bool>) -> Self {
        let k = selected.iter().filter(|&&b| b).count();
        TransmitMask {
            selected,
            k,
            bytes: k * BYTES_PER_REGION,
        }
    }

    pub fn empty() -> Self {
        TransmitMask::from_selected(vec![false; N_REGIONS])
    }

    pub fn full() -> Self {
        TransmitMask::from_selected(vec![true; N_REGIONS])
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&i| self.selected[i]).collect()
    }
}

/// Order of regions by `(score desc, index asc)`.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k(scores: &[f64], k: usize) -> TransmitMask {
    let mut selected = vec![false; scores.len()];
    for &i in ranking(scores).iter().take(k) {
        selected[i] = true;
    }
    TransmitMask::from_selected(selected)
}

#[derive(Clone, Debug)]
pub struct PolicyContext {
    pub budget: f64,
    pub sender: AgentPose,
    /// The other agents in ascending id order.
    pub neighbors: Vec<AgentPose>,
    pub receiver_id: usize,
    pub gt_region_mass: Option<Vec<f64>>,
    pub key: RngKey,
}

impl PolicyContext {
    pub fn new(agents: &[AgentPose], sender: usize, receiver: usize, budget: f64, key: RngKey) -> Self {
        let mut neighbors: Vec<AgentPose> = agents.iter().copied().filter(|a| a.id != sender).collect();
        neighbors.sort_by_key(|a| a.id);
        PolicyContext {
            budget,
            sender: agents.iter().copied().find(|a| a.id == sender).expect("sender is one of the agents"),
            neighbors,
            receiver_id: receiver,
            gt_region_mass: None,
            key,
        }
    }

    pub fn with_mass(mut self, mass: Vec<f64>) -> Self {
        self.gt_region_mass = Some(mass);
        self
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(Error::contract("policy", format!("budget {} outside [0, 1]", self.budget)));
        }
        if self.receiver_id == self.sender.id {
            return Err(Error::contract("policy", "receiver equals sender"));
        }
        Ok(())
    }

    /// `(x/64, y/64, heading/pi, id/3)` of the sender.
    pub fn agent_features(&self) -> [f64; 4] {
        pose_features(&self.sender, self.sender.id as f64 / 3.0)
    }

    /// Three `(x/64, y/64, heading/pi, is_receiver)` blocks.
    pub fn neighbor_features(&self) -> Vec<f64> {
        self.neighbors
            .iter()
            .flat_map(|n| pose_features(n, if n.id == self.receiver_id { 1.0 } else { 0.0 }))
            .collect()
    }
}

fn pose_features(a: &AgentPose, last: f64) -> [f64; 4] {
    [a.x / 64.0, a.y / 64.0, a.heading / std::f64::consts::PI, last]
}

fn check_regions(regions: &[f32]) -> Result<()> {
    if regions.len() != N_REGIONS * FEAT_DIM {
        return Err(Error::contract(
            "policy",
            format!("expected 64 x 32 region values, got {}", regions.len()),
        ));
    }
    Ok(())
}

pub fn confidence_scores(regions: &[f32]) -> Vec<f64> {
    regions
        .chunks(FEAT_DIM)
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .collect()
}

pub fn uncertainty_scores(regions: &[f32]) -> Vec<f64> {
    regions
        .chunks(FEAT_DIM)
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().map(|&v| v as f64).sum::<f64>() / n;
            r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

pub fn random_scores(key: RngKey) -> Vec<f64> {
    (0..N_REGIONS).map(|k| key.with(k as u64).unit()).collect()
}

/// Masks of the policies that need no learned weights. Returns `None` for
/// learned policies.
pub fn select_reactive(kind: PolicyKind, regions: &[f32], ctx: &PolicyContext) -> Result<Option<TransmitMask>> {
    check_regions(regions)?;
    ctx.check()?;
    let k = regions_allowed(ctx.budget);
    let mask = match kind {
        PolicyKind::NoComm => TransmitMask::empty(),
        PolicyKind::Always => TransmitMask::full(),
        PolicyKind::Random => top_k(&random_scores(ctx.key), k),
        PolicyKind::Confidence => top_k(&confidence_scores(regions), k),
        PolicyKind::Uncertainty => top_k(&uncertainty_scores(regions), k),
        PolicyKind::Oracle => {
            let mass = ctx
                .gt_region_mass
                .as_ref()
                .ok_or_else(|| Error::contract("select_oracle", "ground-truth region mass missing"))?;
            if mass.len() != N_REGIONS {
                return Err(Error::contract("select_oracle", format!("{} mass entries", mass.len())));
            }
            top_k(mass, k)
        }
        _ => return Ok(None),
    };
    Ok(Some(mask))
}

/// Scores from a learned per-sender policy (receiver independent).
pub struct SenderScores {
    /// Ranking scores.
    pub scores: Var,
    /// Soft transmit weights in `(0, 1)` used during training.
    pub weights: Var,
}

/// Scores from the reasoning policy for one link.
pub struct LinkScores {
    /// `[64]` transmit probabilities.
    pub p: Var,
    /// `[64]` priority scores.
    pub s: Var,
}

impl Network {
    /// `[64]` where2comm scores from a 3-layer MLP.
    pub fn where2comm<T: Real>(&self, cx: &mut Ctx<T>, regions: Var) -> Result<SenderScores> {
        let n = &self.where2comm;
        let h = cx.linear(regions, &n.l1)?;
        let h = cx.tape.relu(h)?;
        let h = cx.linear(h, &n.l2)?;
        let h = cx.tape.relu(h)?;
        let s = cx.linear(h, &n.l3)?;
        let scores = cx.tape.reshape(s, &[N_REGIONS])?;
        let weights = cx.tape.sigmoid(scores)?;
        Ok(SenderScores { scores, weights })
    }

    /// `[64]` gates from `[region || mean region]`.
    pub fn ic3net<T: Real>(&self, cx: &mut Ctx<T>, regions: Var) -> Result<SenderScores> {
        let n = &self.ic3net;
        let ones = cx.constant(&[N_REGIONS, N_REGIONS], vec![T::from_f64_lossy(1.0 / N_REGIONS as f64); N_REGIONS * N_REGIONS])?;
        let global = cx.tape.matmul(ones, regions)?;
        let x = cx.tape.concat(&[regions, global], 1)?;
        let h = cx.linear(x, &n.l1)?;
        let h = cx.tape.relu(h)?;
        let g = cx.linear(h, &n.l2)?;
        let g = cx.tape.reshape(g, &[N_REGIONS])?;
        let gates = cx.tape.sigmoid(g)?;
        Ok(SenderScores {
            scores: gates,
            weights: gates,
        })
    }

    /// `[64]` linear scores of the sparse-mask policy.
    pub fn mask_policy<T: Real>(&self, cx: &mut Ctx<T>, regions: Var) -> Result<SenderScores> {
        let s = cx.linear(regions, &self.mask.l1)?;
        let scores = cx.tape.reshape(s, &[N_REGIONS])?;
        let weights = cx.tape.sigmoid(scores)?;
        Ok(SenderScores { scores, weights })
    }

    /// `sum |w|` over the mask network's weight matrix.
    pub fn mask_l1<T: Real>(&self, cx: &mut Ctx<T>) -> Result<Var> {
        let w = cx.p(self.mask.l1.w);
        let a = cx.tape.abs(w)?;
        cx.tape.sum(a)
    }

    /// Runs the reasoning transformer on a batch of links. `links[i]`
    /// pairs a sender's `[64, 32]` region tokens with the link context.
    pub fn r2t<T: Real>(&self, cx: &mut Ctx<T>, links: &[(Var, &PolicyContext)]) -> Result<Vec<LinkScores>> {
        let n = links.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let net = &self.r2t;
        let d = R2T_DIM;
        let t = R2T_TOKENS;
        let cast = |v: f64| T::from_f64_lossy(v);

        let mut agent = Vec::with_capacity(4 * n);
        let mut nbr = Vec::with_capacity(12 * n);
        let mut budget = Vec::with_capacity(n);
        for (_, ctx) in links {
            ctx.check()?;
            agent.extend(ctx.agent_features().iter().map(|&v| cast(v)));
            nbr.extend(ctx.neighbor_features().iter().map(|&v| cast(v)));
            budget.push(cast(ctx.budget));
        }
        let agent = cx.constant(&[n, 4], agent)?;
        let nbr = cx.constant(&[n, 12], nbr)?;
        let budget = cx.constant(&[n, 1], budget)?;
        let agent = cx.linear(agent, &net.agent)?;
        let nbr = cx.linear(nbr, &net.neighbor)?;
        let budget = cx.linear(budget, &net.budget)?;

        // Region projections are shared by all links of one sender.
        let mut projected: Vec<(Var, Var)> = Vec::new();
        let mut seqs = Vec::with_capacity(n);
        for (i, &(regions, _)) in links.iter().enumerate() {
            let proj = match projected.iter().find(|(r, _)| *r == regions) {
                Some(&(_, p)) => p,
                None => {
                    let p = cx.linear(regions, &net.region)?;
                    projected.push((regions, p));
                    p
                }
            };
            let a = cx.tape.slice(agent, 0, i, 1)?;
            let b = cx.tape.slice(nbr, 0, i, 1)?;
            let c = cx.tape.slice(budget, 0, i, 1)?;
            seqs.push(cx.tape.concat(&[proj, a, b, c], 0)?);
        }
        let x = cx.tape.concat(&seqs, 0)?;
        let pos = cx.p(net.pos);
        let pos = cx.tape.concat(&vec![pos; n], 0)?;
        let mut x = cx.tape.add(x, pos)?;

        let dh = d / R2T_HEADS;
        let scale = cast(1.0 / (dh as f64).sqrt());
        for layer in &net.layers {
            let h = cx.norm(x, &layer.ln1)?;
            let q = cx.linear(h, &layer.q)?;
            let k = cx.linear(h, &layer.k)?;
            let v = cx.linear(h, &layer.v)?;
            let mut per_link = Vec::with_capacity(n);
            for l in 0..n {
                let (ql, kl, vl) = (
                    cx.tape.slice(q, 0, l * t, t)?,
                    cx.tape.slice(k, 0, l * t, t)?,
                    cx.tape.slice(v, 0, l * t, t)?,
                );
                let mut heads = Vec::with_capacity(R2T_HEADS);
                for hd in 0..R2T_HEADS {
                    let qh = cx.tape.slice(ql, 1, hd * dh, dh)?;
                    let kh = cx.tape.slice(kl, 1, hd * dh, dh)?;
                    let vh = cx.tape.slice(vl, 1, hd * dh, dh)?;
                    let att = cx.tape.matmul_nt(qh, kh)?;
                    let att = cx.tape.scale(att, scale)?;
                    let att = cx.tape.softmax(att)?;
                    heads.push(cx.tape.matmul(att, vh)?);
                }
                per_link.push(cx.tape.concat(&heads, 1)?);
            }
            let a = cx.tape.concat(&per_link, 0)?;
            let a = cx.linear(a, &layer.o)?;
            x = cx.tape.add(x, a)?;
            let h = cx.norm(x, &layer.ln2)?;
            let h = cx.linear(h, &layer.ffn1)?;
            let h = cx.tape.relu(h)?;
            let h = cx.linear(h, &layer.ffn2)?;
            x = cx.tape.add(x, h)?;
        }
        let x = cx.norm(x, &net.final_norm)?;
        let pt = cx.linear(x, &net.transmit)?;
        let pt = cx.tape.reshape(pt, &[n, t])?;
        let pt = cx.tape.slice(pt, 1, 0, N_REGIONS)?;
        let p_all = cx.tape.sigmoid(pt)?;
        let st = cx.linear(x, &net.priority)?;
        let st = cx.tape.reshape(st, &[n, t])?;
        let s_all = cx.tape.slice(st, 1, 0, N_REGIONS)?;

        let mut out = Vec::with_capacity(n);
        for l in 0..n {
            let p = cx.tape.slice(p_all, 0, l, 1)?;
            let p = cx.tape.reshape(p, &[N_REGIONS])?;
            let s = cx.tape.slice(s_all, 0, l, 1)?;
            let s = cx.tape.reshape(s, &[N_REGIONS])?;
            out.push(LinkScores { p, s });
        }
        Ok(out)
    }
}

/// R2T ranking score `p * s` per region.
pub fn r2t_rank_scores(p: &[f64], s: &[f64]) -> Vec<f64> {
    p.iter().zip(s).map(|(a, b)| a * b).collect()
}
