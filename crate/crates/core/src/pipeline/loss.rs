use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½·Σ(ŷ − t)²`.
    Mse,
    SoftmaxCrossEntropy,
}

impl Loss {
    pub fn value(&self, logits: &Tensor, target: &Tensor) -> Result<f64> {
        check(logits, target)?;
        Ok(match self {
            Loss::Mse => 0.5 * logits.data().iter().zip(target.data()).map(|(y, t)| (y - t).powi(2)).sum::<f64>(),
            Loss::SoftmaxCrossEntropy => {
                let lse = log_sum_exp(logits.data());
                logits.data().iter().zip(target.data()).map(|(y, t)| t * (lse - y)).sum()
            }
        })
    }

    /// Gradient with respect to the logits.
    pub fn grad(&self, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
        check(logits, target)?;
        match self {
            Loss::Mse => logits.sub(target),
            Loss::SoftmaxCrossEntropy => softmax(logits).sub(target),
        }
    }
}

fn check(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.numel() != target.numel() {
        return Err(Error::dim(format!("logits {:?} vs target {:?}", logits.shape(), target.shape())));
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let lse = log_sum_exp(logits.data());
    logits.map(|y| (y - lse).exp())
}
