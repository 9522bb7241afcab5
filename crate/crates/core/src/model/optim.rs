//! First-order optimizers applied in place to a parameter slice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adadelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    /// Adam with learning rate 1e-3.
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
        }
    }

    /// Adadelta with learning rate 1.0.
    pub fn adadelta() -> Self {
        Self {
            kind: OptimizerKind::Adadelta,
            learning_rate: 1.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADADELTA_RHO: f64 = 0.95;
const ADADELTA_EPS: f64 = 1e-6;

/// Optimizer moments for a fixed-length parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        let moments = match config.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam | OptimizerKind::Adadelta => n_params,
        };
        Ok(Self {
            config,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one descent step with `update` as the gradient estimate.
    pub fn step(&mut self, params: &mut [f64], update: &[f64]) -> Result<()> {
        if params.len() != update.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer update",
                expected: params.len(),
                actual: update.len(),
            });
        }
        if self.config.kind != OptimizerKind::Sgd && self.first.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer state",
                expected: self.first.len(),
                actual: params.len(),
            });
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(update) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = update[i];
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    params[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
            OptimizerKind::Adadelta => {
                for i in 0..params.len() {
                    let g = update[i];
                    let sq = &mut self.first[i];
                    let acc = &mut self.second[i];
                    *sq = ADADELTA_RHO * *sq + (1.0 - ADADELTA_RHO) * g * g;
                    let delta = ((*acc + ADADELTA_EPS).sqrt() / (*sq + ADADELTA_EPS).sqrt()) * g;
                    *acc = ADADELTA_RHO * *acc + (1.0 - ADADELTA_RHO) * delta * delta;
                    params[i] -= lr * delta;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut s = OptimizerState::new(OptimizerConfig::sgd(0.5), 2).unwrap();
        let mut p = [1.0, -1.0];
        s.step(&mut p, &[2.0, 4.0]).unwrap();
        assert_eq!(p, [0.0, -3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = OptimizerState::new(OptimizerConfig::adam(), 3).unwrap();
        let mut p = [0.0; 3];
        s.step(&mut p, &[5.0, -0.01, 0.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adadelta_first_step() {
        let mut s = OptimizerState::new(OptimizerConfig::adadelta(), 1).unwrap();
        let mut p = [0.0];
        let g = 2.0;
        s.step(&mut p, &[g]).unwrap();
        let sq = 0.05 * g * g;
        let expected = (1e-6f64).sqrt() / (sq + 1e-6f64).sqrt() * g;
        assert!((p[0] + expected).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = OptimizerState::new(
            OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 0.05,
            },
            2,
        )
        .unwrap();
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            s.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(OptimizerState::new(OptimizerConfig::sgd(0.0), 1).is_err());
        let mut s = OptimizerState::new(OptimizerConfig::adam(), 2).unwrap();
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 1]).is_err());
    }
}
