use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Param;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "bad optimizer settings {self:?}"
            )))
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one bias-corrected update from each parameter's accumulated
    /// gradient.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer built for a different parameter list"
        );
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, (w, gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[k] = c.beta1 * md[k] + (1.0 - c.beta1) * gk;
                vd[k] = c.beta2 * vd[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                *w -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn params(seed: u64) -> Vec<Param> {
        let mut rng = Rng::new(seed);
        vec![
            Param::new("w", Matrix::from_fn(3, 4, |_, _| rng.normal())),
            Param::new("b", Matrix::from_fn(1, 4, |_, _| rng.normal())),
        ]
    }

    fn with_grads(seed: u64) -> Vec<Param> {
        let mut ps = params(seed);
        let mut rng = Rng::new(seed + 100);
        for p in &mut ps {
            let g = Matrix::from_fn(p.value.rows(), p.value.cols(), |_, _| 10.0 * rng.normal());
            p.accumulate_grad(&g);
        }
        ps
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut ps = with_grads(1);
        let before = ps.clone();
        let refs: Vec<&Param> = ps.iter().collect();
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
            &refs,
        );
        opt.step(&mut ps.iter_mut().collect::<Vec<_>>());
        for (a, b) in ps.iter().zip(&before) {
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn first_step_is_bounded_by_learning_rate() {
        for seed in 0..10 {
            let mut ps = with_grads(seed);
            let before = ps.clone();
            let refs: Vec<&Param> = ps.iter().collect();
            let cfg = AdamConfig::default();
            let mut opt = Adam::new(cfg, &refs);
            opt.step(&mut ps.iter_mut().collect::<Vec<_>>());
            for (a, b) in ps.iter().zip(&before) {
                let moved = a.value.sub(&b.value).unwrap().max_abs();
                assert!(moved <= cfg.learning_rate * (1.0 + 1e-9), "{moved}");
            }
        }
    }

    #[test]
    fn matches_scalar_reference() {
        // two steps on f(w) = w^2 / 2 starting at w = 1
        let mut p = Param::new("w", Matrix::scalar(1.0));
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[&p]);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);

            p.zero_grad();
            let g = p.value.clone();
            p.accumulate_grad(&g);
            opt.step(&mut [&mut p]);
        }
        assert!((p.value.item() - w).abs() < 1e-15);
    }
}
