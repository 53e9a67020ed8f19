use crate::error::{Error, Result};
use crate::model::{ForwardGraph, Prediction};
use crate::tensor::{Tensor, Var};

/// The three training losses for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    /// Cross-entropy of the fused prediction `y_p`.
    pub loss_p: f64,
    /// Cross-entropy of the target-only prediction `y_t`.
    pub loss_t: f64,
    /// Cross-entropy of the context-integrated prediction `y_tc`.
    pub loss_tc: f64,
}

impl LossBundle {
    pub fn total(&self) -> f64 {
        self.loss_p + self.loss_t + self.loss_tc
    }
}

fn check(b: LossBundle, label: usize) -> Result<LossBundle> {
    let ok = [b.loss_p, b.loss_t, b.loss_tc]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
    if ok {
        Ok(b)
    } else {
        Err(Error::Numeric(format!(
            "non-finite loss for label {label}: loss_p={} loss_t={} loss_tc={}",
            b.loss_p, b.loss_t, b.loss_tc
        )))
    }
}

fn cross_entropy(y: &Tensor, label: usize) -> Result<f64> {
    let tape = crate::tensor::Tape::new();
    Ok(tape.constant(y.clone()).cross_entropy(label)?.item())
}

/// Loss values of a finished prediction.
pub fn compute_losses(pred: &Prediction, label: usize) -> Result<LossBundle> {
    for (name, y) in [("y_p", &pred.y_p), ("y_t", &pred.y_t), ("y_tc", &pred.y_tc)] {
        if y.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{name} is not finite for label {label}: {:?}",
                y.data()
            )));
        }
    }
    check(
        LossBundle {
            loss_p: cross_entropy(&pred.y_p, label)?,
            loss_t: cross_entropy(&pred.y_t, label)?,
            loss_tc: cross_entropy(&pred.y_tc, label)?,
        },
        label,
    )
}

/// Loss nodes on the graph plus their sum, the quantity that is
/// backpropagated.
pub struct GraphLosses<'t> {
    pub loss_p: Var<'t>,
    pub loss_t: Var<'t>,
    pub loss_tc: Var<'t>,
    pub total: Var<'t>,
}

impl GraphLosses<'_> {
    pub fn values(&self) -> LossBundle {
        LossBundle {
            loss_p: self.loss_p.item(),
            loss_t: self.loss_t.item(),
            loss_tc: self.loss_tc.item(),
        }
    }
}

pub fn graph_losses<'t>(graph: &ForwardGraph<'t>, label: usize) -> Result<GraphLosses<'t>> {
    let loss_p = graph.y_p.cross_entropy(label)?;
    let loss_t = graph.y_t.cross_entropy(label)?;
    let loss_tc = graph.y_tc.cross_entropy(label)?;
    let total = loss_p.add(loss_t)?.add(loss_tc)?;
    let out = GraphLosses {
        loss_p,
        loss_t,
        loss_tc,
        total,
    };
    check(out.values(), label)?;
    Ok(out)
}
