use serde::{Deserialize, Serialize};

use crate::nn::{ParamLayout, ParameterSet};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(layout: &ParamLayout) -> Self {
        Self {
            m: ParameterSet::zeros(layout),
            v: ParameterSet::zeros(layout),
            steps: 0,
        }
    }

    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParameterSet<T>, grads: &ParameterSet<T>) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        // lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded in.
        let step = T::of(cfg.learning_rate * bc2.sqrt() / bc1);
        let eps = T::of(cfg.eps * bc2.sqrt());
        let values = params.values_mut().iter_mut();
        let moments = self.m.values_mut().iter_mut().zip(self.v.values_mut().iter_mut());
        for ((p, (m, v)), g) in values.zip(moments).zip(grads.values()) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut l = ParamLayout::default();
        l.push("w", vec![3], ParamKind::Weight);
        let mut p = ParameterSet::<f64>::zeros(&l);
        let mut g = ParameterSet::<f64>::zeros(&l);
        g.get_mut(0).copy_from_slice(&[2.0, -0.5, 0.0]);
        let mut opt = Adam::new(&l);
        opt.step(&AdamConfig::default(), &mut p, &g);
        // With bias correction the first step is lr * sign(g).
        let got = p.get(0);
        assert!((got[0] + 2e-4).abs() < 1e-9);
        assert!((got[1] - 2e-4).abs() < 1e-9);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut l = ParamLayout::default();
        l.push("w", vec![2], ParamKind::Weight);
        let mut p = ParameterSet::<f32>::init(&l, 3);
        let before = p.clone();
        let mut g = ParameterSet::<f32>::zeros(&l);
        g.get_mut(0).copy_from_slice(&[1.0, -1.0]);
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(&l);
        opt.step(&cfg, &mut p, &g);
        assert_eq!(p, before);
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn matches_textbook_update_over_several_steps() {
        let mut l = ParamLayout::default();
        l.push("w", vec![1], ParamKind::Weight);
        let cfg = AdamConfig::default();
        let mut p = ParameterSet::<f64>::zeros(&l);
        let mut opt = Adam::new(&l);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let gval = 0.3 * t as f64 - 1.0;
            let mut g = ParameterSet::<f64>::zeros(&l);
            g.get_mut(0)[0] = gval;
            opt.step(&cfg, &mut p, &g);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * gval;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * gval * gval;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            assert!((p.get(0)[0] - w).abs() < 1e-12);
        }
    }
}
