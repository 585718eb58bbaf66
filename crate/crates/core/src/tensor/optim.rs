use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Gradients, Mat, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

/// Linear warmup to the base rate, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.base
        } else {
            self.base * (step + 1) as f64 / self.warmup as f64
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let m: Vec<Mat> = store.iter().map(|(_, _, p)| Array2::zeros(p.raw_dim())).collect();
        Self { config, v: m.clone(), m, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr`; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, lr: f64) -> f64 {
        assert_eq!(grads.tag, store.tag(), "gradients belong to another store");
        let norm = grads.global_norm();
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            grads.scale(self.config.clip_norm / norm);
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule { base: 1e-3, warmup: 10 };
        assert!((s.at(0) - 1e-4).abs() < 1e-15);
        assert!((s.at(4) - 5e-4).abs() < 1e-15);
        assert_eq!(s.at(10), 1e-3);
        assert_eq!(s.at(1000), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.filled("x", 1, 2, 1.0);
        let mut opt = AdamW::new(&store, AdamWConfig { clip_norm: 0.0, ..Default::default() });
        let mut g = Gradients { tag: store.tag(), slots: vec![Some(Array2::from_elem((1, 2), 0.3))] };
        opt.step(&mut store, &mut g, 0.1);
        assert!((store.get(id)[[0, 0]] - 0.9).abs() < 1e-6);
    }
}
