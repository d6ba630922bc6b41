//! AdamW, warmup-cosine learning rate, global-norm gradient clipping.

use super::{ParamStore, Real};

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the scale factor applied (1.0 when no clipping happened).
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::from_f64_lossy(scale);
    for id in store.ids().collect::<Vec<_>>() {
        store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
    }
    scale
}

pub fn global_grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
    store
        .ids()
        .flat_map(|id| store.grad(id).iter())
        .map(|g| {
            let v = g.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = |id| vec![T::zero(); store.value(id).numel()];
        AdamW {
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(1.0 - lr * self.weight_decay);
        let eps = T::from_f64_lossy(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn scalar_store(p: f64, g: f64) -> (ParamStore<f64>, crate::autograd::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(p)).unwrap();
        s.grad_mut(id)[0] = g;
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7, 0.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, 0.1);
        assert_eq!(s.value(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, 0.1);
        // m_hat = 1, v_hat = 1 after bias correction
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(id).item() - want).abs() < 1e-12);
    }

    #[test]
    fn pure_decay() {
        let (mut s, id) = scalar_store(1.0, 0.0);
        let mut opt = AdamW::new(&s, 0.1);
        opt.step(&mut s, 0.1);
        assert!((s.value(id).item() - 0.99).abs() < 1e-12);
    }

    #[test]
    fn schedule_landmarks() {
        let sched = LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((sched.lr_at(0) - 1e-4).abs() < 1e-12);
        assert!((sched.lr_at(10) - 1e-3).abs() < 1e-9);
        assert!((sched.lr_at(60) - 5e-4).abs() < 1e-9);
        assert!(sched.lr_at(110).abs() < 1e-9);
        for s in 0..110 {
            assert!(sched.lr_at(s) >= 0.0);
        }
    }

    #[test]
    fn clipping_rules() {
        let (mut s, id) = scalar_store(0.0, 0.5);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 1.0);
        assert_eq!(s.grad(id)[0], 0.5);

        let (mut s, _) = scalar_store(0.0, 2.0);
        assert!((clip_grad_norm(&mut s, 1.0) - 0.5).abs() < 1e-12);
        assert!((global_grad_norm(&s) - 1.0).abs() < 1e-6);
    }
}
