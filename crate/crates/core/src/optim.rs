//! SGD with momentum and the learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::regularizers::WeightDecayPolicy;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 · cos(7πk / 16K)` over the `K` total steps
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn lr_at(&self, lr0: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr0,
            LrSchedule::Cosine => {
                let frac = step as f64 / total_steps.max(1) as f64;
                lr0 * (7.0 * std::f64::consts::PI * frac / 16.0).cos()
            }
        }
    }
}

/// Momentum SGD. Weight decay is added to the gradient before the momentum
/// update, so with zero momentum a step is exactly
/// `w ← w − lr·g − lr·c·w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub nesterov: bool,
    /// flat velocity buffer in parameter visiting order
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<P: Parameters<T>>(model: &P, momentum: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            nesterov,
            velocity: vec![T::zero(); model.num_parameters()],
        }
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<T>) -> Result<()> {
        if v.len() != self.velocity.len() {
            return Err(Error::Dimension(format!(
                "velocity of length {} for {} parameters",
                v.len(),
                self.velocity.len()
            )));
        }
        self.velocity = v;
        Ok(())
    }

    pub fn step<P: Parameters<T>>(
        &mut self,
        model: &mut P,
        grad: &P,
        lr: f64,
        decay: &WeightDecayPolicy,
        epoch: usize,
    ) -> Result<()> {
        let mut flat = Vec::with_capacity(self.velocity.len());
        grad.visit("", &mut |_, g| flat.extend_from_slice(g));
        if flat.len() != self.velocity.len() {
            return Err(Error::Dimension("gradient layout differs from the model".into()));
        }
        let lr = T::lit(lr);
        let mu = T::lit(self.momentum);
        let mut offset = 0;
        let velocity = &mut self.velocity;
        let nesterov = self.nesterov;
        model.visit_mut("", &mut |name, params| {
            let c = T::lit(decay.coefficient_for(name, epoch));
            for (j, w) in params.iter_mut().enumerate() {
                let i = offset + j;
                let g = flat[i] + c * *w;
                let v = mu * velocity[i] + g;
                velocity[i] = v;
                *w -= lr * if nesterov { g + mu * v } else { v };
            }
            offset += params.len();
        });
        Ok(())
    }
}
