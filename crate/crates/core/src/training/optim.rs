use std::f64::consts::PI;

use crate::numerics::{ParamStore, Scalar};

/// Linear warmup to `base`, then cosine annealing to `min` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (PI * progress).cos())
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
/// Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.value(id).len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            lr_scale: vec![1.0; sizes.len()],
        }
    }

    /// Multiplies the learning rate of every parameter whose name matches `pick`.
    pub fn scale_lr<T: Scalar>(&mut self, store: &ParamStore<T>, pick: impl Fn(&str) -> bool, factor: f64) {
        for (slot, id) in store.ids().enumerate() {
            if pick(store.name(id)) {
                self.lr_scale[slot] *= factor;
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held in `store`. Parameters
    /// flagged without decay (biases, norms, mask tokens) skip the decay term.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let decay = if store.decays(id) { self.weight_decay } else { 0.0 };
            let lr = lr * self.lr_scale[slot];
            let grad: Vec<f64> = store.grad(id).data().iter().map(|g| g.as_f64()).collect();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, p) in store.value_mut(id).data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                let mut x = p.as_f64();
                x -= lr * decay * x;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *p = T::from_f64(x);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        store.scale_grads(T::from_f64(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(value: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::full(&[1], value), decay).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = single(0.7, true);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, 0.1);
        assert_eq!(s.value(s.id("x").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn zero_gradient_with_decay_is_multiplicative() {
        let mut s = single(0.7, true);
        let mut opt = AdamW::new(&s, 0.05);
        opt.step(&mut s, 0.1);
        assert!((s.value(s.id("x").unwrap()).data()[0] - 0.7 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_flagged_parameters() {
        let mut s = single(0.7, false);
        let mut opt = AdamW::new(&s, 0.05);
        opt.step(&mut s, 0.1);
        assert_eq!(s.value(s.id("x").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            base: 1e-3,
            min: 1e-6,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert!((s.lr(0) - 1e-4).abs() < 1e-18);
        assert!((s.lr(9) - 1e-3).abs() < 1e-18);
        assert!((s.lr(10) - 1e-3).abs() < 1e-18);
        assert!((s.lr(99) - 1e-6).abs() < 1e-15);
        for t in 10..99 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }
}
