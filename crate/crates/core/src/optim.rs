//! Momentum SGD and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::config::{OptimizerConfig, Schedule};
use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `v = momentum * v + g + wd * θ; θ -= lr * v`. Without momentum and weight
/// decay this is plain `θ -= lr * g`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
    pub steps: u64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            ..Self::default()
        }
    }

    /// Updates every parameter that has a gradient. With `round_f32` the new
    /// parameters and velocities are rounded to `f32` precision.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, round_f32: bool) -> Result<()> {
        let round = |v: f64| if round_f32 { v as f32 as f64 } else { v };
        for (name, g) in grads {
            let theta = params.get_mut(name)?;
            if theta.shape() != g.shape() {
                return Err(CoreError::shape(format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((t, v), gv) in theta.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                let d = gv + self.weight_decay * *t;
                *v = round(self.momentum * *v + d);
                *t = round(*t - lr * *v);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based) out of `epochs`.
pub fn learning_rate(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = epoch as f64 / cfg.epochs.max(1) as f64;
            0.5 * cfg.lr * (1.0 + (PI * t).cos())
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|t| t.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn plain_step() {
        let mut p = ParamStore::new();
        p.insert("t", Tensor::vector(vec![1.0]));
        let mut sgd = Sgd::new(0.0, 0.0);
        sgd.step(&mut p, &one("t", 0.5), 0.1, false).unwrap();
        assert!((p.get("t").unwrap().data()[0] - 0.95).abs() < 1e-15);
        sgd.step(&mut p, &one("t", 0.0), 0.1, false).unwrap();
        assert!((p.get("t").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion_by_hand() {
        // g = 1, 2, 3 with momentum 0.5, lr 0.1:
        // v1 = 1, θ1 = -0.1; v2 = 2.5, θ2 = -0.35; v3 = 4.25, θ3 = -0.775
        let mut p = ParamStore::new();
        p.insert("t", Tensor::vector(vec![0.0]));
        let mut sgd = Sgd::new(0.5, 0.0);
        let expect = [(1.0, -0.1), (2.5, -0.35), (4.25, -0.775)];
        for (i, (v, t)) in expect.iter().enumerate() {
            sgd.step(&mut p, &one("t", (i + 1) as f64), 0.1, false).unwrap();
            assert!((sgd.velocity["t"].data()[0] - v).abs() < 1e-12);
            assert!((p.get("t").unwrap().data()[0] - t).abs() < 1e-12);
        }
        assert_eq!(sgd.steps, 3);
    }

    #[test]
    fn schedules_and_clipping() {
        let mut cfg = OptimizerConfig::default();
        assert_eq!(learning_rate(&cfg, 7), 0.1);
        cfg.schedule = Schedule::Cosine;
        cfg.epochs = 10;
        assert!((learning_rate(&cfg, 0) - 0.1).abs() < 1e-15);
        assert!((learning_rate(&cfg, 5) - 0.05).abs() < 1e-12);
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(vec![3.0, 4.0]))]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }
}
