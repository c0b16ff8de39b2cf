use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamSet, TrainMask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam with bias-corrected moments, keyed by tensor name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    moments: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Updates every tensor whose partition is in `mask`; all other tensors
    /// are left untouched. Consumes the gradients of the updated tensors.
    pub fn step(&mut self, params: &mut ParamSet, mask: TrainMask) -> Result<()> {
        for e in params.iter() {
            if mask.contains(e.partition) && e.tensor.grad().is_none() {
                return Err(Error::Contract(format!(
                    "trainable tensor {} has no gradient",
                    e.name
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for e in params.iter_mut() {
            if !mask.contains(e.partition) {
                continue;
            }
            let n = e.tensor.len();
            let m = self.moments.entry(e.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            if m.first.len() != n {
                return Err(Error::Contract(format!(
                    "optimizer state for {} has {} slots, tensor has {n}",
                    e.name,
                    m.first.len()
                )));
            }
            let grad = e.tensor.grad().expect("checked above").to_vec();
            let w = e.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                let mhat = m.first[i] / c1;
                let vhat = m.second[i] / c2;
                w[i] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
            e.tensor.clear_grad();
        }
        Ok(())
    }
}
