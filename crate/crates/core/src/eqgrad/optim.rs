use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{Gradients, NumericsError, ParameterSet};

/// First-order parameter update rule.
pub trait Optimizer {
    /// Applies one update. Gradients for unknown parameters are an error;
    /// parameters without a gradient are left unchanged.
    fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<(), NumericsError>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn check_shapes(params: &ParameterSet, grads: &Gradients) -> Result<(), NumericsError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownInput(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                node: name.clone(),
                detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            });
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<(), NumericsError> {
        check_shapes(params, grads)?;
        for (name, g) in grads {
            let values = params.values_mut(name).expect("checked");
            for (p, gi) in values.iter_mut().zip(g.data()) {
                *p -= self.lr * gi;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment updates with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<(), NumericsError> {
        check_shapes(params, grads)?;
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let values = params.values_mut(name).expect("checked");
            for (((p, gi), mi), vi) in values.iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.config.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .values()
        .map(|g| g.dot(g))
        .sum::<f64>()
        .sqrt()
}
