//! End-to-end training of the shared perception stack and all learned
//! transmit policies under the bandwidth-aware objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{clip_grad_norm, global_grad_norm, AdamW, LrSchedule, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cell, Cell};
use crate::model::{Ctx, Network};
use crate::pipeline::{Pass, PassConfig};
use crate::policy::PolicyKind;
use crate::rng::{purpose, RngKey};
use crate::scene::{Observation, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Splits {
            train: 500,
            val: 80,
            test: 150,
        }
    }
}

impl Splits {
    /// First scene id and count of a split; ids are disjoint across splits.
    pub fn range(&self, split: &str) -> Result<(u64, usize)> {
        match split {
            "train" => Ok((0, self.train)),
            "val" => Ok((self.train as u64, self.val)),
            "test" => Ok(((self.train + self.val) as u64, self.test)),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub grad_clip: f64,
    pub lambda_bw: f64,
    pub lambda_l1: f64,
    pub seeds: Vec<u64>,
    pub splits: Splits,
    pub train_budgets: Vec<f64>,
    /// Steps per epoch; `None` means one pass over the training split.
    pub steps_per_epoch: Option<usize>,
    pub val_budget: f64,
    pub val_policy: PolicyKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            grad_clip: 1.0,
            lambda_bw: 0.01,
            lambda_l1: 1e-4,
            seeds: vec![42, 123, 456, 789, 1024],
            splits: Splits::default(),
            train_budgets: vec![0.1, 0.5, 1.0],
            steps_per_epoch: None,
            val_budget: 0.5,
            val_policy: PolicyKind::R2t,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "need 0 <= warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            )));
        }
        let weights = [self.lr, self.weight_decay, self.grad_clip, self.lambda_bw, self.lambda_l1];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("lr, weight_decay, grad_clip and lambdas must be finite and >= 0".into()));
        }
        if self.train_budgets.is_empty() || self.train_budgets.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("train_budgets must be a non-empty list of fractions in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Terms of the training objective for one scene.
pub struct LossTerms {
    pub loss: Var,
    pub l_det: Var,
    pub l_bw: Var,
}

/// `L_det + lambda_bw * L_bw (+ lambda_l1 * |w|_1)` for a scene pass.
pub fn scene_loss<T: crate::autograd::Real>(
    cx: &mut Ctx<T>,
    pass: &Pass,
    scene: &Scene,
    lambda_bw: f64,
    lambda_l1: f64,
) -> Result<LossTerms> {
    let n = cx.tape.shape(pass.logits)[0];
    let target: Vec<T> = (0..n)
        .flat_map(|_| scene.gt_heatmap.iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    let l_det = cx.tape.bce_with_logits(pass.logits, &target)?;
    let bw = cx.tape.scale(pass.l_bw, T::from_f64_lossy(lambda_bw))?;
    let mut loss = cx.tape.add(l_det, bw)?;
    if let Some(l1) = pass.l1 {
        let l1 = cx.tape.scale(l1, T::from_f64_lossy(lambda_l1))?;
        loss = cx.tape.add(loss, l1)?;
    }
    Ok(LossTerms {
        loss,
        l_det,
        l_bw: pass.l_bw,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_det: f64,
    pub l_bw: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub step: usize,
    pub val_ap: f64,
}

/// State of a step whose loss or gradients were not finite.
#[derive(Clone, Debug, Serialize)]
pub struct NanDump {
    pub step: usize,
    pub scene_id: u64,
    pub policy: PolicyKind,
    pub budget: f64,
    pub lr: f64,
    pub loss: f64,
    pub l_det: f64,
    pub l_bw: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub best: ParamStore<f32>,
    pub last: ParamStore<f32>,
    pub best_val_ap: f64,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochRow>,
}

#[derive(Debug)]
pub enum TrainError {
    NonFinite(Box<NanDump>),
    Other(Error),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Other(e)
    }
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::NonFinite(d) => write!(
                f,
                "non-finite loss at step {} (scene {}, policy {}, budget {})",
                d.step, d.scene_id, d.policy, d.budget
            ),
            TrainError::Other(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

/// Policy and budget drawn for a training step.
pub fn step_draw(seed: u64, step: usize, budgets: &[f64]) -> (PolicyKind, f64) {
    let mut rng = RngKey::new(seed).with(purpose::SAMPLING).with(step as u64).rng();
    let policy = PolicyKind::TRAINED[rng.random_range(0..PolicyKind::TRAINED.len())];
    let budget = budgets[rng.random_range(0..budgets.len())];
    (policy, budget)
}

/// Scene visiting order for an epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngKey::new(seed).with(purpose::SAMPLING).with(u64::MAX - epoch as u64).rng());
    order
}

pub struct StepStats {
    pub loss: f64,
    pub l_det: f64,
    pub l_bw: f64,
    pub grad_norm: f64,
}

/// Forward and backward on one scene; gradients are left in `store`.
pub fn compute_gradients(
    net: &Network,
    store: &mut ParamStore<f32>,
    scene: &Scene,
    obs: &[Observation],
    cfg: &PassConfig,
    train: &TrainConfig,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    tape.set_finite_checks(false);
    let (stats, grads) = {
        let mut cx = Ctx::new(&mut tape, store);
        let pass = net.run_scene(&mut cx, scene, obs, cfg)?;
        let terms = scene_loss(&mut cx, &pass, scene, train.lambda_bw, train.lambda_l1)?;
        let stats = StepStats {
            loss: cx.tape.value(terms.loss).item() as f64,
            l_det: cx.tape.value(terms.l_det).item() as f64,
            l_bw: cx.tape.value(terms.l_bw).item() as f64,
            grad_norm: 0.0,
        };
        let grads = if stats.loss.is_finite() {
            Some(cx.tape.backward(terms.loss)?)
        } else {
            None
        };
        (stats, grads)
    };
    store.zero_grad();
    if let Some(g) = grads {
        store.accumulate(&tape, &g);
    }
    Ok(stats)
}

/// Trains one seed. `progress` is called after each validation pass.
pub fn train_one_seed(
    net: &Network,
    init: ParamStore<f32>,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    cfg: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&EpochRow),
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()).into());
    }
    let mut store = init;
    let mut opt = AdamW::new(&store, cfg.weight_decay);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(train_scenes.len());
    let sched = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let observations: Vec<Vec<Observation>> = train_scenes.iter().map(|s| s.observations()).collect();
    let mut log = Vec::with_capacity(sched.total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(seed, epoch, train_scenes.len());
        for i in 0..steps_per_epoch {
            let idx = order[i % order.len()];
            let scene = &train_scenes[idx];
            let (policy, budget) = step_draw(seed, step, &cfg.train_budgets);
            let pass_cfg = PassConfig::train(policy, budget, seed, scene.scene_id);
            let lr = sched.lr_at(step);
            let mut stats = compute_gradients(net, &mut store, scene, &observations[idx], &pass_cfg, cfg)?;
            stats.grad_norm = global_grad_norm(&store);
            clip_grad_norm(&mut store, cfg.grad_clip);
            if !stats.loss.is_finite() || !stats.grad_norm.is_finite() {
                return Err(TrainError::NonFinite(Box::new(NanDump {
                    step,
                    scene_id: scene.scene_id,
                    policy,
                    budget,
                    lr,
                    loss: stats.loss,
                    l_det: stats.l_det,
                    l_bw: stats.l_bw,
                    grad_norm: stats.grad_norm,
                })));
            }
            opt.step(&mut store, lr);
            log.push(LogRow {
                step,
                lr,
                loss: stats.loss,
                l_det: stats.l_det,
                l_bw: stats.l_bw,
                grad_norm: stats.grad_norm,
            });
            step += 1;
        }
        let val_ap = if val_scenes.is_empty() {
            f64::NAN
        } else {
            let level = val_scenes[0].config.occlusion_level;
            let cell = Cell {
                policy: cfg.val_policy,
                budget: cfg.val_budget,
                occlusion: level,
                drop_rate: 0.0,
            };
            evaluate_cell(net, &store, val_scenes, cell, seed)?.ap
        };
        let row = EpochRow { epoch, step, val_ap };
        progress(&row);
        epochs.push(row);
        if best.as_ref().is_none_or(|(ap, _)| val_ap > *ap) {
            best = Some((val_ap, store.clone()));
        }
    }
    let (best_val_ap, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        last: store,
        best_val_ap,
        log,
        epochs,
    })
}

pub fn log_to_csv(rows: &[LogRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.splits.range("test").unwrap(), (580, 150));
        let bad = TrainConfig { warmup_epochs: 60, ..Default::default() };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "warmup_epochs": 1}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn draws_cover_policies_and_budgets() {
        let budgets = [0.1, 0.5, 1.0];
        let draws: Vec<_> = (0..500).map(|s| step_draw(7, s, &budgets)).collect();
        for p in PolicyKind::TRAINED {
            assert!(draws.iter().any(|d| d.0 == p));
        }
        for b in budgets {
            assert!(draws.iter().any(|d| d.1 == b));
        }
        assert_eq!(step_draw(7, 3, &budgets), step_draw(7, 3, &budgets));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(1, 2, 50);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
