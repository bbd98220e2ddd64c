//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use ndarray::ArrayD;

use crate::store::{ParamId, ParamStore};
use crate::tape::Gradients;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    /// Parameters this optimizer is allowed to touch; everything else is
    /// frozen by construction.
    subset: Vec<ParamId>,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self::for_params(store, store.ids().collect(), lr, weight_decay)
    }

    /// Optimizer restricted to `subset`; other parameters cannot change.
    pub fn for_params(store: &ParamStore, subset: Vec<ParamId>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            subset,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.subset
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &pid in &self.subset {
            let Some(g) = grads.get(pid) else { continue };
            let m = self.m[pid.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[pid.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let theta = store.get_mut(pid);
            for ((mv, vv), (tv, gv)) in
                m.iter_mut().zip(v.iter_mut()).zip(theta.iter_mut().zip(g.iter()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *tv -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *tv);
            }
        }
    }
}

/// Cosine annealing from `lr_start` to `lr_end` over `total` steps.
pub fn cosine_lr(step: u64, total: u64, lr_start: f64, lr_end: f64) -> f64 {
    if total <= 1 {
        return lr_end;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-5), 1e-4);
        let last = cosine_lr(99, 100, 1e-4, 1e-5);
        assert!((last - 1e-5).abs() < 1e-12);
        let mid = cosine_lr(49, 99, 1e-4, 1e-5);
        assert!((mid - (1e-5 + 0.5 * (1e-4 - 1e-5))).abs() < 1e-7);
        // Monotone decreasing.
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = cosine_lr(s, 100, 1e-4, 1e-5);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", ndarray::arr1(&[5.0, -3.0]));
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        let target = ndarray::arr1(&[1.0, 2.0]).into_dyn();
        for _ in 0..800 {
            let mut tape = Tape::new();
            let xn = tape.param(&store, x);
            let loss = tape.mse_loss(xn, &target, None);
            let grads = tape.backward(loss, store.len());
            opt.step(&mut store, &grads);
        }
        let v = store.get(x);
        assert!((v[[0]] - 1.0).abs() < 1e-3 && (v[[1]] - 2.0).abs() < 1e-3, "{v:?}");
    }

    #[test]
    fn subset_optimizer_never_touches_frozen_params() {
        let mut store = ParamStore::new();
        let frozen = store.add("frozen", ndarray::arr1(&[1.0]));
        let live = store.add("live", ndarray::arr1(&[1.0]));
        let before = store.checksum(&[frozen]);
        let mut opt = AdamW::for_params(&store, vec![live], 0.1, 0.01);
        let target = ndarray::arr1(&[0.0]).into_dyn();
        for _ in 0..10 {
            let mut tape = Tape::new();
            let f = tape.param(&store, frozen);
            let l = tape.param(&store, live);
            let s = tape.add(f, l);
            let loss = tape.mse_loss(s, &target, None);
            let grads = tape.backward(loss, store.len());
            // Gradient exists for both, but only `live` may move.
            assert!(grads.get(frozen).is_some());
            opt.step(&mut store, &grads);
        }
        assert_eq!(store.checksum(&[frozen]), before);
        assert_ne!(store.get(live)[[0]], 1.0);
    }
}
