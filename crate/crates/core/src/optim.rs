//! AdamW and the cosine warm-restart learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VadError};
use crate::nn::{ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub betas: (f64, f64),
    pub min_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// First restart period, in epochs.
    pub t0_epochs: f64,
    pub t_mult: f64,
    /// Rescale gradients to at most `clip_norm` global norm.
    pub clip: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            weight_decay: 0.05,
            eps: 1e-8,
            betas: (0.9, 0.95),
            min_lr: 1e-5,
            batch_size: 128,
            epochs: 20,
            t0_epochs: 5.0,
            t_mult: 2.0,
            clip: true,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VadError::Config(m));
        if !(self.min_lr > 0.0 && self.lr > self.min_lr) {
            return bad(format!("need lr > min_lr > 0 (lr {}, min_lr {})", self.lr, self.min_lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.t0_epochs <= 0.0 || self.t_mult < 1.0 {
            return bad(format!("restart period {} / multiplier {} invalid", self.t0_epochs, self.t_mult));
        }
        if self.clip && self.clip_norm <= 0.0 {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> CosineRestarts {
        CosineRestarts {
            lr: self.lr,
            min_lr: self.min_lr,
            t0: self.t0_epochs * steps_per_epoch.max(1) as f64,
            t_mult: self.t_mult,
        }
    }
}

/// Cosine annealing with warm restarts, evaluated per optimizer step.
///
/// Each period is closed at its end: the last step of a period sits at
/// `min_lr` and the following step starts the next period.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRestarts {
    pub lr: f64,
    pub min_lr: f64,
    pub t0: f64,
    pub t_mult: f64,
}

impl CosineRestarts {
    pub fn at(&self, step: f64) -> f64 {
        let mut start = 0.0;
        let mut len = self.t0;
        while step > start + len {
            start += len;
            len *= self.t_mult;
        }
        let phase = (step - start) / len;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

/// Learning rate at `step` for a run with `steps_per_epoch` updates per epoch.
pub fn lr_schedule(step: usize, config: &TrainConfig, steps_per_epoch: usize) -> f64 {
    config.schedule(steps_per_epoch).at(step as f64)
}

/// AdamW with decoupled weight decay applied to every tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Self { betas: config.betas, eps: config.eps, weight_decay: config.weight_decay, step: 0, m: vec![], v: vec![] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if self.m.is_empty() {
            self.m = store.values.iter().map(|v| vec![T::zero(); v.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (b1, b2) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (inv_c1, inv_sqrt_c2) = (T::of(1.0 / c1), T::of(1.0 / c2.sqrt()));
        let (eps, lr_t) = (T::of(self.eps), T::of(lr));
        let shrink = T::of(1.0 - lr * self.weight_decay);
        for (((p, g), m), v) in store.values.iter_mut().zip(&store.grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let update = (*m * inv_c1) / ((*v).sqrt() * inv_sqrt_c2 + eps);
                *p = *p * shrink - lr_t * update;
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(T::of(max_norm / (norm + 1e-12)));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;

    fn sched() -> CosineRestarts {
        TrainConfig::default().schedule(10)
    }

    #[test]
    fn schedule_anchor_points() {
        let s = sched();
        assert!((s.at(0.0) - 1.5e-4).abs() < 1e-12);
        assert!((s.at(50.0) - 1e-5).abs() < 1e-12);
        assert!((s.at(25.0) - 8.0e-5).abs() < 1e-12);
        // second period is twice as long
        assert!(s.at(51.0) > 1.4e-4);
        assert!((s.at(150.0) - 1e-5).abs() < 1e-12);
        assert!((s.at(100.0) - 8.0e-5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_still_decays() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", &[3], Init::Ones, &mut rng);
        let mut opt = AdamW::new(&TrainConfig::default());
        opt.step(&mut store, 1e-3);
        for &v in store.value(id) {
            assert!((v - (1.0 - 1e-3 * 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", &[2], Init::Zeros, &mut rng);
        store.grads[0] = vec![0.3, -2.0];
        let mut opt = AdamW::new(&TrainConfig { weight_decay: 0.0, ..TrainConfig::default() });
        opt.step(&mut store, 0.01);
        let v = store.value(id);
        assert!((v[0] + 0.01).abs() < 1e-8 && (v[1] - 0.01).abs() < 1e-8, "{v:?}");
    }

    #[test]
    fn clipping_caps_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[2], Init::Zeros, &mut rng);
        store.grads[0] = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { min_lr: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
