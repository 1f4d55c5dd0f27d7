//! SGD with momentum, optional Nesterov lookahead, and decoupled-by-flag
//! weight decay (applied to conv/FC weights only).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::param::Parameters;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            nesterov: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        for v in [self.learning_rate, self.momentum, self.weight_decay] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::InvalidConfig(
                    "sgd hyperparameters must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Optimizer state: hyperparameters plus per-parameter velocity buffers,
/// keyed by parameter name and zero-initialized on first use.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    /// One update over every parameter:
    /// `g' = g + wd*w; v = m*v + g'; step = m*v + g'` (Nesterov) or `v`;
    /// `w -= lr * step`. Gradients are consumed and cleared; a parameter
    /// without a gradient is an error (it signals a broken tape).
    pub fn step<M: Parameters<T>>(&mut self, model: &mut M) -> Result<()> {
        let lr = T::of(self.config.learning_rate);
        let momentum = T::of(self.config.momentum);
        let decay = T::of(self.config.weight_decay);
        let nesterov = self.config.nesterov;
        let mut result = Ok(());
        model.visit_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            let grad = match p.take_grad() {
                Ok(g) => g,
                Err(e) => {
                    result = Err(e);
                    return;
                }
            };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let w = p.value.data_mut();
            for i in 0..grad.len() {
                let mut g = grad[i];
                if p.decay {
                    g += decay * w[i];
                }
                v[i] = momentum * v[i] + g;
                let step = if nesterov { momentum * v[i] + g } else { v[i] };
                w[i] -= lr * step;
            }
        });
        result
    }
}
