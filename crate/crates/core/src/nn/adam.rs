use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor};
use crate::error::{Error, Result};

use super::params::{Binding, ParamRole, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecay {
    /// `decay · param` is added to the gradient before the moment updates.
    Coupled,
    /// `lr · decay · param` is subtracted from the parameter directly.
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: WeightDecay,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay: WeightDecay::Coupled,
        }
    }
}

/// Gradients index-aligned with a [`ParamStore`]; `None` means "not updated".
pub type ParamGrads = Vec<Option<Tensor<f32>>>;

/// Pulls the gradient of every bound parameter out of a backward pass.
pub fn collect_grads(binding: &Binding, mut grads: Gradients<f32>) -> ParamGrads {
    binding.vars().iter().map(|v| grads.take(*v)).collect()
}

/// First/second moment estimates and step counter of one optimization run.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |p: &super::params::Param| {
            if p.trainable() {
                vec![0.0; p.tensor.numel()]
            } else {
                Vec::new()
            }
        };
        Self {
            config,
            step: 0,
            first: store.iter().map(zeros).collect(),
            second: store.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Running statistics and the
    /// padding row of embedding tables are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.by_index(i);
            if g.shape() != p.tensor.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { param: p.name.clone() });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.learning_rate / correction1) as f32;
        let sqrt_c2 = correction2.sqrt() as f32;
        let eps = c.epsilon as f32;
        let wd = c.weight_decay as f32;
        let lr = c.learning_rate as f32;

        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let param = store.by_index_mut(i);
            let skip = match param.role {
                ParamRole::RunningStat => continue,
                ParamRole::PaddedEmbedding => param.tensor.shape()[1],
                ParamRole::Weight => 0,
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let values = param.tensor.data_mut();
            for j in skip..values.len() {
                let mut grad = g.data()[j];
                if c.decay == WeightDecay::Coupled {
                    grad += wd * values[j];
                }
                m[j] = b1 * m[j] + (1.0 - b1) * grad;
                v[j] = b2 * v[j] + (1.0 - b2) * grad * grad;
                let denom = v[j].sqrt() / sqrt_c2 + eps;
                if c.decay == WeightDecay::Decoupled {
                    values[j] -= lr * wd * values[j];
                }
                values[j] -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
