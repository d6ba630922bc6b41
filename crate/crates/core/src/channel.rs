//! Byte accounting and lossy per-region delivery between agents.

use crate::model::{BYTES_PER_REGION, N_AGENTS, N_REGIONS};
use crate::policy::{regions_allowed, TransmitMask};
use crate::rng::RngKey;

/// Full-budget traffic into one receiver, in kilobytes, used for labels.
pub const FULL_KB_PER_RECEIVER: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkBudget {
    pub budget_fraction: f64,
    pub regions_allowed: usize,
    pub bytes_allowed: usize,
    /// `B * 24` KB; a label only, never used for enforcement.
    pub reported_kb: f64,
}

impl LinkBudget {
    pub fn new(budget_fraction: f64) -> Self {
        let regions = regions_allowed(budget_fraction);
        LinkBudget {
            budget_fraction,
            regions_allowed: regions,
            bytes_allowed: regions * BYTES_PER_REGION,
            reported_kb: budget_fraction * FULL_KB_PER_RECEIVER,
        }
    }
}

/// Independent per-region loss on a link. Survival of region `k` on link
/// `sender -> receiver` is decided by the key path `(sender, receiver, k)`.
#[derive(Clone, Copy, Debug)]
pub struct DropConfig {
    pub drop_rate: f64,
    pub key: RngKey,
}

impl DropConfig {
    pub fn lossless() -> Self {
        DropConfig {
            drop_rate: 0.0,
            key: RngKey::new(0),
        }
    }

    pub fn survives(&self, sender: usize, receiver: usize, region: usize) -> bool {
        if self.drop_rate <= 0.0 {
            return true;
        }
        self.key
            .with(sender as u64)
            .with(receiver as u64)
            .with(region as u64)
            .unit()
            >= self.drop_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeliveredRegion {
    pub sender: usize,
    pub region: usize,
}

/// Regions of `mask` that reach `receiver`, in ascending region order.
/// Feature vectors are looked up by `(sender, region)` on the receiving side.
pub fn deliver(mask: &TransmitMask, sender: usize, receiver: usize, drop: &DropConfig) -> Vec<DeliveredRegion> {
    (0..N_REGIONS)
        .filter(|&k| mask.selected[k] && drop.survives(sender, receiver, k))
        .map(|region| DeliveredRegion { sender, region })
        .collect()
}

/// Bytes sent on all links into one receiver.
pub fn account<'a>(masks: impl IntoIterator<Item = &'a TransmitMask>) -> usize {
    masks.into_iter().map(|m| m.k * BYTES_PER_REGION).sum()
}

/// Maximum bytes one receiver can be sent under `budget`.
pub fn receiver_cap(budget: &LinkBudget) -> usize {
    (N_AGENTS - 1) * budget.bytes_allowed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_budget_values() {
        let b = LinkBudget::new(0.1);
        assert_eq!((b.regions_allowed, b.bytes_allowed), (6, 768));
        assert!((b.reported_kb - 2.4).abs() < 1e-12);
        assert_eq!(receiver_cap(&LinkBudget::new(1.0)), 24576);
    }

    #[test]
    fn delivery_extremes() {
        let mask = TransmitMask::full();
        let key = RngKey::new(3);
        assert_eq!(deliver(&mask, 0, 1, &DropConfig { drop_rate: 0.0, key }).len(), 64);
        assert!(deliver(&mask, 0, 1, &DropConfig { drop_rate: 1.0, key }).is_empty());
    }

    #[test]
    fn accounting_matches_budget() {
        for (b, bytes) in [(1.0, 24576), (0.5, 12288), (0.1, 2304)] {
            let k = regions_allowed(b);
            let m = crate::policy::top_k(&[0.0; 64], k);
            assert_eq!(account([&m, &m, &m]), bytes);
        }
    }
}
