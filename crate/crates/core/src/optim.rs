//! First-order optimizers: Adam (default) and plain SGD.

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{Binding, NetworkParams};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer `{other}` (expected adam|sgd)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn with_lr(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }
}

/// Moment accumulators for one parameter set.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Fails, leaving the
    /// parameters untouched, if any trainable parameter lacks a gradient.
    pub fn step(&mut self, params: &mut NetworkParams<T>, binding: &Binding, grads: &Gradients<T>) -> Result<()> {
        let n = params.len();
        let mut found = Vec::with_capacity(n);
        for i in 0..n {
            let (name, tensor, trainable) = params.entry_at(i);
            if !trainable {
                found.push(None);
                continue;
            }
            let g = binding
                .var(i)
                .and_then(|v| grads.get(v))
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            g.expect_shape("optimizer_step", tensor.shape())?;
            found.push(Some(g));
        }

        self.step += 1;
        self.first.resize(n, None);
        self.second.resize(n, None);
        let c = self.config;
        let lr = T::from_f64(c.learning_rate);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let eps = T::from_f64(c.epsilon);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));

        for (i, g) in found.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensor_at_mut(i);
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
