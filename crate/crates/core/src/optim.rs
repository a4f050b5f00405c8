//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Optimizer state, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        AdamState::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }
}

/// One Adam update over `(name, parameter, gradient)` triples.
///
/// Callers pass only trainable parameters. The step counter advances once per
/// call regardless of how many parameters are updated.
pub fn adam_step<'a, I>(params: I, state: &mut AdamState) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a [f64])>,
{
    let items: Vec<_> = params.into_iter().collect();
    for (name, p, g) in &items {
        if p.len() != g.len() {
            return Err(Error::Dimension(format!(
                "adam: gradient of length {} for parameter `{name}` of shape {:?}",
                g.len(),
                p.shape()
            )));
        }
        if let Some(m) = state.moments.get(*name) {
            if m.first.len() != p.len() {
                return Err(Error::Dimension(format!(
                    "adam: moment buffers for `{name}` have length {} but parameter has {}",
                    m.first.len(),
                    p.len()
                )));
            }
        }
    }
    state.step_count += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config.clone();
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p, g) in items {
        let m = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g[i];
            m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m.first[i] / c1;
            let vhat = m.second[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + epsilon);
        }
    }
    Ok(())
}
