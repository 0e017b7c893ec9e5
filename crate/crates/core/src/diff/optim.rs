use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD with classical momentum: `v <- m*v + g; theta <- theta - lr*v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            buffers: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        })
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.buffers
    }

    /// Applies one update and clears every gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.buffers.len() {
            return Err(Error::ParamMismatch(format!(
                "optimizer tracks {} buffers for {} parameters",
                self.buffers.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        for (p, v) in params.iter_mut().zip(&mut self.buffers) {
            let g = p.grad.take().map(Tensor::into_data).unwrap_or_default();
            if v.len() != g.len() {
                return Err(Error::ParamMismatch(format!("buffer for `{}`", p.name)));
            }
            for ((theta, vel), grad) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + grad;
                *theta -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}
