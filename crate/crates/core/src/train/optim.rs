use crate::error::{Error, Result};
use crate::params::VisitParams;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 4,
            grad_accum_steps: 1,
            epochs: 1,
            weight_decay: 0.0,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    /// Full-scale regime: lr 2e-5, batch 1, 16 accumulation steps, 1 epoch.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 1,
            grad_accum_steps: 16,
            epochs: 1,
            weight_decay: 0.0,
            seed: 0,
            clip_norm: None,
        }
    }

    /// Examples contributing to one optimizer step.
    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size, grad_accum_steps and epochs must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. Only parameters that are trainable and have a
    /// gradient entry move.
    pub fn step<T: VisitParams + ?Sized>(
        &mut self,
        model: &mut T,
        grads: &BTreeMap<String, Array2<f64>>,
        cfg: &OptimizerConfig,
    ) {
        self.t += 1;
        let scale = match cfg.clip_norm {
            Some(c) => {
                let norm = grads
                    .values()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.t as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = cfg.learning_rate;
        let wd = cfg.weight_decay;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, p| {
            if p.frozen {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let m = ms
                .entry(name.to_owned())
                .or_insert_with(|| Array2::zeros(p.value.raw_dim()));
            let v = vs
                .entry(name.to_owned())
                .or_insert_with(|| Array2::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    let g = g * scale;
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                    *w -= lr * (update + wd * *w);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{join, Param};

    struct Quad(Param, Param);

    impl VisitParams for Quad {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
            f(&join(prefix, "x"), &self.0);
            f(&join(prefix, "frozen"), &self.1);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "x"), &mut self.0);
            f(&join(prefix, "frozen"), &mut self.1);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quad(
            Param::trainable(Array2::from_elem((1, 2), 1.0)),
            Param::frozen(Array2::from_elem((1, 1), 5.0)),
        );
        let mut grads = BTreeMap::new();
        grads.insert(
            "x".to_owned(),
            Array2::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap(),
        );
        grads.insert("frozen".to_owned(), Array2::from_elem((1, 1), 1.0));
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        Adam::new().step(&mut q, &grads, &cfg);
        // Bias-corrected first step is lr * sign(g) up to epsilon.
        assert!((q.0.value[[0, 0]] - 0.9).abs() < 1e-8);
        assert!((q.0.value[[0, 1]] - 1.1).abs() < 1e-8);
        assert_eq!(q.1.value[[0, 0]], 5.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad(
            Param::trainable(Array2::from_elem((1, 2), 4.0)),
            Param::frozen(Array2::zeros((1, 1))),
        );
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut adam = Adam::new();
        for _ in 0..2000 {
            let mut grads = BTreeMap::new();
            grads.insert("x".to_owned(), q.0.value.mapv(|v| 2.0 * (v - 1.0)));
            adam.step(&mut q, &grads, &cfg);
        }
        assert!(q.0.value.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn full_scale_preset_values() {
        let p = OptimizerConfig::full_scale();
        assert_eq!(
            (p.learning_rate, p.batch_size, p.grad_accum_steps, p.epochs),
            (2e-5, 1, 16, 1)
        );
        assert_eq!(p.examples_per_step(), 16);
    }
}
