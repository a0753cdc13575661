//! Adam with bias correction, plus global-norm clipping.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![F::zero(); p.value.len()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One in-place update. Non-finite gradients abort the step before any
    /// parameter or moment changes.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>) -> Result<()> {
        if let Some(name) = grads.first_non_finite(store) {
            return Err(Error::Diverged {
                what: "gradient",
                detail: format!("parameter {name} at step {}", self.step + 1),
            });
        }
        self.step += 1;
        let cfg = self.config;
        let b1 = F::from_f64_lossy(cfg.beta1);
        let b2 = F::from_f64_lossy(cfg.beta2);
        let bc1 = F::from_f64_lossy(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = F::from_f64_lossy(1.0 - cfg.beta2.powi(self.step as i32));
        let lr = F::from_f64_lossy(cfg.lr);
        let eps = F::from_f64_lossy(cfg.eps);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.param(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((p, &gv), mv), vv) in store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut ParamGrads<F>, max_norm: f64) -> F {
    let norm = grads.global_norm();
    let max = F::from_f64_lossy(max_norm);
    if norm > max {
        grads.scale(max / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        (s, id)
    }

    fn grad(id: ParamId, g: f64) -> ParamGrads<f64> {
        let mut pg = ParamGrads::empty(1);
        pg.set(id, Tensor::scalar(g));
        pg
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = one_param(0.7);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            opt.step(&mut s, &grad(id, 0.0)).unwrap();
        }
        assert_eq!(s.get(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = one_param(0.0);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &s);
        opt.step(&mut s, &grad(id, 1.0)).unwrap();
        // m̂ = v̂ = 1 after bias correction, so Δ = lr / (1 + ε).
        let want = -cfg.lr / (1.0 + cfg.eps);
        assert!((s.get(id).item() - want).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let (mut s, id) = one_param(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..2000 {
            opt.step(&mut s, &grad(id, 3.0)).unwrap();
            let now = s.get(id).item();
            last = prev - now;
            prev = now;
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let (mut s, id) = one_param(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let err = opt.step(&mut s, &grad(id, f64::NAN)).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let (mut s, id) = one_param(0.123456789);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, &grad(id, 5.0)).unwrap();
        assert_eq!(s.get(id).item().to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = ParamGrads::<f64>::empty(2);
        g.set(ParamId(0), Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap());
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
