//! AdamW: Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NnError, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates and step counter for one [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParameterSet<f32>) -> Self {
        let zeros = |_: ()| -> BTreeMap<String, Vec<f32>> {
            params.iter().map(|(k, p)| (k.clone(), vec![0.0; p.value.len()])).collect()
        };
        AdamW { config, step: 0, first: zeros(()), second: zeros(()) }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the current gradient accumulators. Gradients are
    /// left in place.
    pub fn step(&mut self, params: &mut ParameterSet<f32>) -> Result<(), NnError> {
        if params.len() != self.first.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.first.len(),
                params.len()
            )));
        }
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let decay = (1.0 - c.learning_rate * c.weight_decay) as f32;
        for (name, p) in params.iter_mut() {
            let (Some(m), Some(v)) = (self.first.get_mut(name), self.second.get_mut(name)) else {
                return Err(NnError::MissingParameter(name.clone()));
            };
            if m.len() != p.value.len() {
                return Err(NnError::Shape(format!("optimizer state for {name} has {} entries, parameter {}", m.len(), p.value.len())));
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bias1;
                let v_hat = *v as f64 / bias2;
                *w -= (c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon)) as f32;
            }
        }
        self.step += 1;
        Ok(())
    }
}
