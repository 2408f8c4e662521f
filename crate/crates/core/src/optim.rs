//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{GradVector, ParamVector};

/// Rescales `grad` in place so its norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut GradVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate } | OptimizerConfig::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate() > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate()
            )));
        }
        Ok(())
    }
}

/// Stateful optimizer that *descends* along the supplied gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        let moments = matches!(config, OptimizerConfig::Adam { .. });
        Optimizer {
            config,
            m: if moments { vec![0.0; len] } else { Vec::new() },
            v: if moments { vec![0.0; len] } else { Vec::new() },
            step: 0,
        }
    }

    pub fn descend(&mut self, params: &mut ParamVector, grad: &GradVector) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer gradient",
                expected: params.len(),
                got: grad.len(),
            });
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { learning_rate } => params.add_scaled(grad, -learning_rate),
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                eps,
            } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let values = params.values_mut();
                for (((p, g), m), v) in values.iter_mut().zip(&grad.values).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("parameter update".into()));
                }
                Ok(())
            }
        }
    }

    /// Ascent is descent on the negated gradient.
    pub fn ascend(&mut self, params: &mut ParamVector, grad: &GradVector) -> Result<()> {
        let mut neg = grad.clone();
        neg.scale(-1.0);
        self.descend(params, &neg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::ArchSpec;

    fn quad_params() -> ParamVector {
        let arch = ArchSpec::new(1, vec![1], 1).unwrap();
        ParamVector::from_values(arch, vec![1.0, -2.0, 0.5, 3.0]).unwrap()
    }

    #[test]
    fn clipping() {
        let mut g = GradVector { values: vec![3.0, 4.0] };
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.values, vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for cfg in [OptimizerConfig::Sgd { learning_rate: 0.1 }, OptimizerConfig::adam(0.05)] {
            let mut p = quad_params();
            let mut opt = Optimizer::new(cfg, p.len());
            for _ in 0..500 {
                let g = GradVector {
                    values: p.values().to_vec(),
                };
                opt.descend(&mut p, &g).unwrap();
            }
            assert!(p.values().iter().all(|v| v.abs() < 1e-2), "{cfg:?}: {:?}", p.values());
        }
    }

    #[test]
    fn ascent_moves_uphill() {
        let mut p = quad_params();
        let before = p.values()[0];
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { learning_rate: 0.1 }, p.len());
        opt.ascend(
            &mut p,
            &GradVector {
                values: vec![1.0, 0.0, 0.0, 0.0],
            },
        )
        .unwrap();
        assert!((p.values()[0] - before - 0.1).abs() < 1e-15);
    }
}
