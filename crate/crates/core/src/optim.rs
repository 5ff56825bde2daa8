//! AdamW with decoupled weight decay: the decay multiplies the parameter
//! directly and the gradient term uses bias-corrected moment estimates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> AdamWConfig {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: per-parameter moment vectors keyed by name, plus the
/// shared step counter.
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> AdamW {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter. A parameter without a gradient
    /// is treated as having a zero gradient, so weight decay and moment
    /// decay still apply to it.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.config;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);

        no_grad(|| -> Result<()> {
            for (name, param) in params {
                let n = param.numel();
                let (m, v) = self
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                if m.len() != n {
                    return Err(Error::Usage(format!(
                        "optimizer state for {name:?} has {} elements, parameter has {n}",
                        m.len()
                    )));
                }
                let grad = param.grad_to_f64_vec();
                if let Some(g) = &grad {
                    if g.len() != n {
                        return Err(Error::Usage(format!(
                            "gradient for {name:?} has {} elements, parameter has {n}",
                            g.len()
                        )));
                    }
                }

                let mut values = param.to_f64_vec();
                for i in 0..n {
                    let g = grad.as_ref().map_or(0.0, |g| g[i]);
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    values[i] = values[i] * (1.0 - cfg.lr * cfg.weight_decay)
                        - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
                param.copy_from(&Tensor::from_vec_f64(param.shape(), values)?.cast(param.dtype()))?;
            }
            Ok(())
        })
    }
}
