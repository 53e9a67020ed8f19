use super::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Optimizer state, one slot tensor per parameter and moment.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// Updates applied so far.
    pub step: u64,
    /// Adam first moment, or SGD velocity.
    pub first: Vec<Tensor>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Optimizer {
            kind: config.optimizer,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            momentum: config.momentum,
            step: 0,
            second: if config.optimizer == OptimizerKind::Adam {
                zeros.clone()
            } else {
                Vec::new()
            },
            first: zeros,
        }
    }

    /// One update from gradients listed in parameter order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.first) {
                    if self.momentum == 0.0 {
                        for (x, &dx) in p.data_mut().iter_mut().zip(g.data()) {
                            *x -= lr * dx;
                        }
                    } else {
                        for ((x, &dx), vel) in
                            p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
                        {
                            *vel = self.momentum * *vel + dx;
                            *x -= lr * *vel;
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((x, &dx), mi), vi) in it {
                        *mi = b1 * *mi + (1.0 - b1) * dx;
                        *vi = b2 * *vi + (1.0 - b2) * dx * dx;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
