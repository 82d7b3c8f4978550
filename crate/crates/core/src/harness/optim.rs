//! Warm-up plus step-decay schedule and decoupled-weight-decay Adam.

use ndarray::Array2;

use crate::autograd::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Schedule {
    /// `base * min(1, t / warmup) * decay^(milestones <= t)` for step `t >= 1`.
    pub fn lr(&self, t: usize) -> f64 {
        let ramp = if self.warmup == 0 {
            1.0
        } else {
            (t as f64 / self.warmup as f64).min(1.0)
        };
        let passed = self.milestones.iter().filter(|&&m| m <= t).count();
        self.base_lr * ramp * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter learning-rate multipliers, aligned with the store.
    lr_scale: Vec<f64>,
    step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            lr_scale: vec![1.0; store.len()],
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.index()] = scale;
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update; parameters without a gradient only receive weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = lr * self.lr_scale[i];
            let p = store.get_mut(id);
            if self.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_closed_form() {
        let s = Schedule {
            base_lr: 1e-3,
            warmup: 75,
            milestones: vec![375, 625, 875, 1125, 1375],
            decay: 0.5,
        };
        for t in 1..=75 {
            assert_abs_diff_eq!(s.lr(t), 1e-3 * t as f64 / 75.0, epsilon = 1e-18);
        }
        assert_eq!(s.lr(374), 1e-3);
        assert_eq!(s.lr(375), 5e-4);
        assert_eq!(s.lr(624), 5e-4);
        assert_eq!(s.lr(625), 2.5e-4);
        assert_eq!(s.lr(1375), 1e-3 / 32.0);
        assert_eq!(s.lr(2000), 1e-3 / 32.0);
        let flat = Schedule { warmup: 0, milestones: vec![], ..s };
        assert_eq!(flat.lr(1), 1e-3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.filled("w", 1, 2, 1.0);
        let mut grads = ParamGrads::new(store.len());
        grads.accumulate(id, &ndarray::array![[2.0, -0.5]]);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &grads, 0.1);
        let w = store.get(id);
        assert_abs_diff_eq!(w[[0, 0]], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(w[[0, 1]], 1.1, epsilon = 1e-6);
    }

    #[test]
    fn decay_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.filled("w", 1, 1, 2.0);
        let grads = ParamGrads::new(store.len());
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut store, &grads, 0.1);
        assert_abs_diff_eq!(store.get(id)[[0, 0]], 2.0 * 0.95, epsilon = 1e-15);
    }

    #[test]
    fn lr_scale_multiplies_the_step() {
        let mut store = ParamStore::new();
        let a = store.filled("a", 1, 1, 1.0);
        let b = store.filled("b", 1, 1, 1.0);
        let mut grads = ParamGrads::new(2);
        grads.accumulate(a, &ndarray::array![[1.0]]);
        grads.accumulate(b, &ndarray::array![[1.0]]);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.0);
        opt.set_lr_scale(b, 10.0);
        opt.step(&mut store, &grads, 0.01);
        assert_abs_diff_eq!(store.get(a)[[0, 0]], 0.99, epsilon = 1e-6);
        assert_abs_diff_eq!(store.get(b)[[0, 0]], 0.9, epsilon = 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.filled("w", 1, 1, 3.0);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..500 {
            let mut g = ParamGrads::new(1);
            let w = store.get(id)[[0, 0]];
            g.accumulate(id, &ndarray::array![[2.0 * (w - 1.0)]]);
            opt.step(&mut store, &g, 0.05);
        }
        assert!((store.get(id)[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
