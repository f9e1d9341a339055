use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Step-size schedule `k -> eta_k`, `k` counted from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { eta: f64 },
    /// `eta_k = scale / k`
    InverseTime { scale: f64 },
    /// Linear interpolation from `start` to `end` over `steps`, then flat.
    Linear { start: f64, end: f64, steps: u64 },
}

impl LearningRate {
    pub fn at(&self, k: u64) -> f64 {
        let k = k.max(1);
        match *self {
            LearningRate::Constant { eta } => eta,
            LearningRate::InverseTime { scale } => scale / k as f64,
            LearningRate::Linear { start, end, steps } => {
                let frac = ((k - 1) as f64 / steps.max(1) as f64).min(1.0);
                start + (end - start) * frac
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: LearningRate,
    pub momentum: f64,
    pub nesterov: bool,
}

impl SgdConfig {
    pub fn plain(eta: f64) -> Self {
        Self { learning_rate: LearningRate::Constant { eta }, momentum: 0.0, nesterov: false }
    }

    pub fn heavy_ball(eta: f64, momentum: f64) -> Self {
        Self { learning_rate: LearningRate::Constant { eta }, momentum, nesterov: false }
    }
}

/// Stochastic gradient descent with heavy-ball (or Nesterov) momentum.
///
/// `buffer <- momentum * buffer + grad`, `param <- param - eta_k * buffer`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    buffers: Vec<Tensor>,
    step: u64,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(NnError::Invalid(format!("momentum {} outside [0, 1)", config.momentum)));
        }
        Ok(Self { config, buffers: Vec::new(), step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// Applies one update. Nothing is modified if any gradient is rejected.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Tensor]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::Shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::Shape(format!("gradient for {name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            if !g.all_finite() {
                return Err(NnError::NonFinite(format!("gradient for {name}")));
            }
        }
        let eta = self.config.learning_rate.at(self.step + 1);
        if !(eta > 0.0) {
            return Err(NnError::Invalid(format!("learning rate {eta} at step {}", self.step + 1)));
        }
        if self.buffers.is_empty() {
            self.buffers = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        } else if self.buffers.len() != grads.len() || self.buffers.iter().zip(grads).any(|(b, g)| b.shape() != g.shape()) {
            return Err(NnError::Shape("parameter set changed between steps".into()));
        }
        let m = self.config.momentum;
        for (((_, p), g), buf) in params.into_iter().zip(grads).zip(&mut self.buffers) {
            let gd = g.data();
            for ((pv, bv), &gv) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(gd) {
                *bv = m * *bv + gv;
                let update = if self.config.nesterov { gv + m * *bv } else { *bv };
                *pv -= eta * update;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: &mut Tensor) -> Vec<(String, &mut Tensor)> {
        vec![("w".to_string(), p)]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Sgd::new(SgdConfig::heavy_ball(0.1, 0.9)).unwrap();
        let mut w = Tensor::vector(vec![1.5, -2.0]);
        opt.step(one(&mut w), &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(w.data(), &[1.5, -2.0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn plain_descent_step() {
        let mut opt = Sgd::new(SgdConfig::plain(0.1)).unwrap();
        let mut w = Tensor::vector(vec![1.0]);
        opt.step(one(&mut w), &[Tensor::vector(vec![2.0])]).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn inverse_time_descent_reaches_minimum() {
        let cfg = SgdConfig { learning_rate: LearningRate::InverseTime { scale: 1.0 }, momentum: 0.0, nesterov: false };
        let mut opt = Sgd::new(cfg).unwrap();
        let mut w = Tensor::vector(vec![-3.0]);
        for _ in 0..100 {
            let g = Tensor::vector(vec![2.0 * (w.item() - 2.0)]);
            opt.step(one(&mut w), &[g]).unwrap();
        }
        assert!((w.item() - 2.0).abs() < 0.05);
    }

    #[test]
    fn momentum_buffer_accumulates() {
        let mut opt = Sgd::new(SgdConfig::heavy_ball(1.0, 0.5)).unwrap();
        let mut w = Tensor::vector(vec![0.0]);
        opt.step(one(&mut w), &[Tensor::vector(vec![1.0])]).unwrap();
        opt.step(one(&mut w), &[Tensor::vector(vec![1.0])]).unwrap();
        // buffers 1.0 then 1.5
        assert!((w.item() + 2.5).abs() < 1e-15);
        assert_eq!(opt.buffers()[0].item(), 1.5);
    }

    #[test]
    fn nesterov_variant_looks_ahead() {
        let cfg = SgdConfig { learning_rate: LearningRate::Constant { eta: 1.0 }, momentum: 0.5, nesterov: true };
        let mut opt = Sgd::new(cfg).unwrap();
        let mut w = Tensor::vector(vec![0.0]);
        opt.step(one(&mut w), &[Tensor::vector(vec![1.0])]).unwrap();
        assert!((w.item() + 1.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = Sgd::new(SgdConfig::plain(0.1)).unwrap();
        let mut w = Tensor::vector(vec![0.0]);
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        let err = opt.step(vec![("layer2.bias".into(), &mut w)], &[bad]).unwrap_err();
        assert!(err.to_string().contains("layer2.bias"));
        assert_eq!(w.item(), 0.0);
    }

    #[test]
    fn momentum_range_is_checked() {
        assert!(Sgd::new(SgdConfig::heavy_ball(0.1, 1.0)).is_err());
    }
}
