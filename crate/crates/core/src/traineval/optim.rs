use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::numcore::Scalar;

/// `peak · min(step / warmup, sqrt(warmup / step))` for `step ≥ 1`.
pub fn learning_rate(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Global L2 norm over every gradient array.
pub fn grad_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, a)| a.data().iter())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the
/// norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = T::of(max_norm / norm);
        for (_, a) in grads.iter_mut() {
            a.scale_in_place(k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one, eps) = (T::one(), T::of(eps));
        let (lr_t, c1, c2) = (T::of(lr), T::of(c1), T::of(c2));
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let parts = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in parts {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Array;

    #[test]
    fn schedule_landmarks() {
        assert!((learning_rate(1000, 1e-3, 1000) - 1e-3).abs() < 1e-18);
        assert!((learning_rate(500, 1e-3, 1000) - 5e-4).abs() < 1e-18);
        assert!((learning_rate(4000, 1e-3, 1000) - 5e-4).abs() < 1e-18);
        assert!(learning_rate(999, 1e-3, 1000) < learning_rate(1000, 1e-3, 1000));
        assert!(learning_rate(1001, 1e-3, 1000) < learning_rate(1000, 1e-3, 1000));
    }

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a", Array::vector(v.to_vec()).unwrap());
        s
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = store(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        let mut g = store(&[0.3, 0.4]);
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g.get("a").unwrap().data(), &[0.3, 0.4]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias correction makes the first step lr·sign(g)
        let mut p = store(&[1.0, -2.0]);
        let g = store(&[0.5, -3.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, &g, 0.1);
        let d = p.get("a").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-8);
        assert!((d[1] + 1.9).abs() < 1e-8);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = store(&[4.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..2000 {
            let x = p.get("a").unwrap().data()[0];
            let g = store(&[2.0 * (x - 1.0)]);
            opt.update(&mut p, &g, 0.01);
        }
        assert!((p.get("a").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }
}
