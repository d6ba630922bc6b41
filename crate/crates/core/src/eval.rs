//! Average precision and the bandwidth, occlusion and packet-drop sweeps.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Real, Tape};
use crate::channel::LinkBudget;
use crate::error::{Error, Result};
use crate::model::{Ctx, Network, BYTES_PER_REGION, N_AGENTS, N_REGIONS};
use crate::pipeline::{receiver_probabilities, PassConfig};
use crate::policy::{regions_allowed, PolicyKind};
use crate::scene::{generate_scene, OcclusionLevel, Scene};

pub const THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const SWEEP_BUDGETS: [f64; 3] = [0.1, 0.5, 1.0];
pub const SWEEP_DROPS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.5];
pub const DROP_POLICIES: [PolicyKind; 4] = [
    PolicyKind::R2t,
    PolicyKind::Where2comm,
    PolicyKind::Ic3net,
    PolicyKind::Confidence,
];
pub const AXIS_BUDGET: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall of `pred >= t` against `gt` at each threshold.
pub fn pr_points(pred: &[f64], gt: &[bool]) -> Result<Vec<PrPoint>> {
    if pred.len() != gt.len() {
        return Err(Error::contract(
            "average_precision",
            format!("prediction has {} cells, ground truth {}", pred.len(), gt.len()),
        ));
    }
    if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract("average_precision", format!("prediction {v} outside [0, 1]")));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    Ok(THRESHOLDS
        .iter()
        .map(|&t| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for (&p, &g) in pred.iter().zip(gt) {
                if p >= t {
                    if g {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let precision = if tp + fp > 0 {
                tp as f64 / (tp + fp) as f64
            } else if positives == 0 {
                1.0
            } else {
                0.0
            };
            let recall = if positives == 0 { 1.0 } else { tp as f64 / positives as f64 };
            PrPoint {
                threshold: t,
                precision,
                recall,
            }
        })
        .collect())
}

/// Area under the monotone precision envelope of the nine operating points.
pub fn average_precision(pred: &[f64], gt: &[bool]) -> Result<f64> {
    let mut pts = pr_points(pred, gt)?;
    pts.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    let mut envelope = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].precision);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, e) in pts.iter().zip(envelope) {
        ap += (p.recall - prev) * e;
        prev = p.recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub policy: PolicyKind,
    pub budget: f64,
    pub kb_label: f64,
    pub bytes: u64,
    pub occlusion: OcclusionLevel,
    pub drop_rate: f64,
    pub seed: u64,
    pub ap: f64,
}

/// Nominal bytes sent to one receiver by the three senders.
pub fn receiver_bytes(policy: PolicyKind, budget: f64) -> u64 {
    let k = match policy {
        PolicyKind::NoComm => 0,
        PolicyKind::Always => N_REGIONS,
        _ => regions_allowed(budget),
    };
    ((N_AGENTS - 1) * k * BYTES_PER_REGION) as u64
}

pub fn kb_label(policy: PolicyKind, budget: f64) -> f64 {
    match policy {
        PolicyKind::NoComm => 0.0,
        PolicyKind::Always => LinkBudget::new(1.0).reported_kb,
        _ => LinkBudget::new(budget).reported_kb,
    }
}

/// Mean AP over the receivers of one scene.
pub fn scene_ap<T: Real>(net: &Network, store: &ParamStore<T>, scene: &Scene, cfg: &PassConfig) -> Result<f64> {
    let obs = scene.observations();
    let mut tape = Tape::new();
    tape.set_finite_checks(false);
    let mut cx = Ctx::new(&mut tape, store);
    let pass = net.run_scene(&mut cx, scene, &obs, cfg)?;
    let probs = receiver_probabilities(&cx, pass.logits);
    let mut total = 0.0;
    for p in &probs {
        total += average_precision(p, &scene.gt_binary)?;
    }
    Ok(total / probs.len() as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct Cell {
    pub policy: PolicyKind,
    pub budget: f64,
    pub occlusion: OcclusionLevel,
    pub drop_rate: f64,
}

/// Macro-averaged AP of one evaluation cell; scenes run in parallel and
/// are reduced in scene order.
pub fn evaluate_cell<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    scenes: &[Scene],
    cell: Cell,
    seed: u64,
) -> Result<EvalRecord> {
    if scenes.is_empty() {
        return Err(Error::contract("evaluate_cell", "no scenes"));
    }
    let aps = scenes
        .par_iter()
        .map(|s| {
            let cfg = PassConfig::eval(cell.policy, cell.budget, cell.drop_rate, seed, s.scene_id);
            scene_ap(net, store, s, &cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ap = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(EvalRecord {
        policy: cell.policy,
        budget: cell.budget,
        kb_label: kb_label(cell.policy, cell.budget),
        bytes: receiver_bytes(cell.policy, cell.budget),
        occlusion: cell.occlusion,
        drop_rate: cell.drop_rate,
        seed,
        ap,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Bandwidth,
    Occlusion,
    Drop,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bandwidth" => Ok(Axis::Bandwidth),
            "occlusion" => Ok(Axis::Occlusion),
            "drop" => Ok(Axis::Drop),
            other => Err(Error::Config(format!("unknown axis {other:?} (expected bandwidth, occlusion or drop)"))),
        }
    }
}

/// Cells of one sweep axis. `base` is the occlusion level of the stored
/// test scenes.
pub fn axis_cells(axis: Axis, base: OcclusionLevel) -> Vec<Cell> {
    let cell = |policy, budget, occlusion, drop_rate| Cell {
        policy,
        budget,
        occlusion,
        drop_rate,
    };
    match axis {
        Axis::Bandwidth => {
            let mut cells = vec![cell(PolicyKind::NoComm, 0.0, base, 0.0)];
            for b in SWEEP_BUDGETS {
                for p in PolicyKind::SELECTIVE {
                    cells.push(cell(p, b, base, 0.0));
                }
            }
            cells
        }
        Axis::Occlusion => OcclusionLevel::ALL
            .iter()
            .flat_map(|&o| PolicyKind::ALL.iter().map(move |&p| cell(p, AXIS_BUDGET, o, 0.0)))
            .collect(),
        Axis::Drop => SWEEP_DROPS
            .iter()
            .flat_map(|&d| DROP_POLICIES.iter().map(move |&p| cell(p, AXIS_BUDGET, base, d)))
            .collect(),
    }
}

/// Test scenes regenerated at `level` from their stored seed and id.
pub fn scenes_at_level(scenes: &[Scene], level: OcclusionLevel) -> Result<Vec<Scene>> {
    scenes
        .iter()
        .map(|s| {
            if s.config.occlusion_level == level {
                Ok(s.clone())
            } else {
                let mut c = s.config.clone();
                c.occlusion_level = level;
                generate_scene(&c, s.seed, s.scene_id)
            }
        })
        .collect()
}

/// Runs every cell of `axes` for one checkpoint.
pub fn sweep_seed<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    scenes: &[Scene],
    axes: &[Axis],
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let base = scenes
        .first()
        .map(|s| s.config.occlusion_level)
        .ok_or_else(|| Error::contract("sweep", "no scenes"))?;
    let mut by_level: BTreeMap<OcclusionLevel, Vec<Scene>> = BTreeMap::new();
    let mut out: Vec<EvalRecord> = Vec::new();
    for &axis in axes {
        for cell in axis_cells(axis, base) {
            let seen = out.iter().any(|r| {
                r.policy == cell.policy
                    && r.budget == cell.budget
                    && r.occlusion == cell.occlusion
                    && r.drop_rate == cell.drop_rate
            });
            if seen {
                continue;
            }
            if !by_level.contains_key(&cell.occlusion) {
                by_level.insert(cell.occlusion, scenes_at_level(scenes, cell.occlusion)?);
            }
            out.push(evaluate_cell(net, store, &by_level[&cell.occlusion], cell, seed)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub budget: f64,
    pub kb_label: f64,
    pub bytes: u64,
    pub occlusion: OcclusionLevel,
    pub drop_rate: f64,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub n_seeds: usize,
}

/// Mean and population standard deviation of AP per cell over seeds.
/// Rows keep the order in which cells first appear; repeated
/// `(cell, seed)` records count once.
pub fn summarize(records: &[EvalRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<(PolicyKind, u64, OcclusionLevel, u64)> = Vec::new();
    let mut groups: BTreeMap<(PolicyKind, u64, OcclusionLevel, u64), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.policy, r.budget.to_bits(), r.occlusion, r.drop_rate.to_bits());
        if !groups.contains_key(&key) {
            order.push(key);
        }
        let g = groups.entry(key).or_default();
        if g.iter().all(|x| x.seed != r.seed) {
            g.push(r);
        }
    }
    order
        .iter()
        .map(|key| {
            let g = &groups[key];
            let n = g.len() as f64;
            // Shifted by the first value so identical seeds give exactly zero spread.
            let first = g[0].ap;
            let mean = first + g.iter().map(|r| r.ap - first).sum::<f64>() / n;
            let var = g.iter().map(|r| (r.ap - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                policy: g[0].policy,
                budget: g[0].budget,
                kb_label: g[0].kb_label,
                bytes: g[0].bytes,
                occlusion: g[0].occlusion,
                drop_rate: g[0].drop_rate,
                ap_mean: mean,
                ap_std: var.sqrt(),
                n_seeds: g.len(),
            }
        })
        .collect()
}

pub fn records_to_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    to_csv(records)
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    to_csv(rows)
}

fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("csv", format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<EvalRecord>, _>>()
        .map_err(|e| Error::format("csv", format!("{}: {e}", path.display())))
}

/// Plain-text tables shaped like the bandwidth, occlusion and drop tables.
pub fn render_tables(rows: &[SummaryRow]) -> String {
    let cell = |r: &SummaryRow| format!("{:.4}±{:.4}", r.ap_mean, r.ap_std);
    let mut out = String::new();
    let mut section = |title: &str, cols: Vec<String>, lines: Vec<(String, Vec<String>)>| {
        if lines.is_empty() {
            return;
        }
        out.push_str(&format!("{title}\n{:<12}", "policy"));
        for c in &cols {
            out.push_str(&format!(" {c:>18}"));
        }
        out.push('\n');
        for (name, vals) in lines {
            out.push_str(&format!("{name:<12}"));
            for v in vals {
                out.push_str(&format!(" {v:>18}"));
            }
            out.push('\n');
        }
        out.push('\n');
    };

    let base = rows
        .iter()
        .filter(|r| r.drop_rate == 0.0)
        .map(|r| r.occlusion)
        .next()
        .unwrap_or(OcclusionLevel::Medium);
    let lookup = |p: PolicyKind, b: Option<f64>, o: OcclusionLevel, d: f64| {
        rows.iter()
            .find(|r| r.policy == p && b.is_none_or(|b| r.budget == b) && r.occlusion == o && r.drop_rate == d)
            .map(cell)
            .unwrap_or_else(|| "-".into())
    };

    let bw_cols = SWEEP_BUDGETS
        .iter()
        .map(|&b| {
            let k = LinkBudget::new(b);
            format!("{:.0}% ({:.1}KB/{}B)", b * 100.0, k.reported_kb, 3 * k.bytes_allowed)
        })
        .collect();
    let bw: Vec<_> = PolicyKind::ALL
        .iter()
        .filter(|&&p| rows.iter().any(|r| r.policy == p && r.occlusion == base && r.drop_rate == 0.0))
        .map(|&p| {
            let vals = SWEEP_BUDGETS
                .iter()
                .map(|&b| {
                    let b = if p == PolicyKind::NoComm { None } else { Some(b) };
                    lookup(p, b, base, 0.0)
                })
                .collect();
            (p.name().to_string(), vals)
        })
        .collect();
    section("AP by bandwidth budget", bw_cols, bw);

    let levels: Vec<OcclusionLevel> = OcclusionLevel::ALL
        .iter()
        .copied()
        .filter(|&o| o != base && rows.iter().any(|r| r.occlusion == o))
        .collect();
    if !levels.is_empty() {
        let occ = PolicyKind::ALL
            .iter()
            .map(|&p| {
                let vals = OcclusionLevel::ALL
                    .iter()
                    .map(|&o| lookup(p, Some(AXIS_BUDGET), o, 0.0))
                    .collect();
                (p.name().to_string(), vals)
            })
            .collect();
        section(
            "AP by occlusion level at 50% bandwidth",
            OcclusionLevel::ALL.iter().map(|o| o.to_string()).collect(),
            occ,
        );
    }

    if rows.iter().any(|r| r.drop_rate > 0.0) {
        let drop = DROP_POLICIES
            .iter()
            .map(|&p| {
                let vals = SWEEP_DROPS.iter().map(|&d| lookup(p, Some(AXIS_BUDGET), base, d)).collect();
                (p.name().to_string(), vals)
            })
            .collect();
        section(
            "AP by packet drop rate at 50% bandwidth",
            SWEEP_DROPS.iter().map(|d| format!("{:.0}%", d * 100.0)).collect(),
            drop,
        );
    }
    out
}
