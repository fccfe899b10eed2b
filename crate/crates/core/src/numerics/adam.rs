use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are kept per parameter, in the
/// order in which parameters are handed to [`AdamState::step`]; that order
/// must stay fixed for the lifetime of the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// One parameter taking part in an optimizer step. `grad == None` skips the
/// parameter (frozen); its moments are left untouched.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: Option<&'a Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Discards moments and the step counter, keeping the hyperparameters.
    pub fn reset(&mut self, lr: f64) {
        *self = AdamState {
            lr,
            ..AdamState::new(lr)
        };
    }

    pub fn step(&mut self, params: &mut [ParamUpdate<'_>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, step received {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.first[i].len() != p.value.len() {
                return Err(Error::Dimension(format!(
                    "optimizer moments for `{}` have {} entries, parameter has {}",
                    p.name,
                    self.first[i].len(),
                    p.value.len()
                )));
            }
            if let Some(g) = p.grad {
                if !g.same_shape(p.value) {
                    return Err(Error::Dimension(format!(
                        "gradient for `{}` has shape {:?}, parameter {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
                }
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
