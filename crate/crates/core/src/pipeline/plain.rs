//! Reference engine with no blinding: forward, backprop and SGD on raw
//! tensors. Used as the oracle the split engine is measured against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::data::Dataset;
use super::integrity::IntegrityReport;
use super::loss::Loss;
use super::model::{self, LayerSpec, Model};
use super::train::{aggregate_norm, MetricRecord, TrainConfig};

/// Per-layer state kept from the forward pass.
#[derive(Debug, Clone)]
pub struct PlainTrace {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

pub fn plain_forward(model: &Model, x: &Tensor) -> Result<(Tensor, PlainTrace)> {
    let mut act = x.clone();
    let mut trace = PlainTrace { inputs: Vec::with_capacity(model.len()), argmax: Vec::with_capacity(model.len()) };
    for layer in model.layers() {
        trace.inputs.push(act.clone());
        let mut arg = None;
        act = match layer.spec {
            LayerSpec::Dense { .. } => {
                layer.spec.operand_shape(act.shape())?;
                let w = layer.weights.as_ref().expect("linear layer has weights");
                layer.spec.op().expect("linear").apply(w, &model::augment(&act))?
            }
            LayerSpec::Conv2d { .. } => {
                let w = layer.weights.as_ref().expect("linear layer has weights");
                layer.spec.op().expect("linear").apply(w, &act)?
            }
            LayerSpec::Relu => model::relu(&act),
            LayerSpec::MaxPool { size, stride } => {
                let (y, a) = model::max_pool(&act, size, stride)?;
                arg = Some(a);
                y
            }
        };
        trace.argmax.push(arg);
    }
    Ok((act, trace))
}

/// Per-sample weight gradients, one per linear layer in forward order.
pub fn plain_backward(model: &Model, trace: &PlainTrace, loss_grad: &Tensor) -> Result<Vec<Tensor>> {
    if trace.inputs.len() != model.len() {
        return Err(Error::protocol("trace does not belong to this model"));
    }
    let mut delta = loss_grad.clone();
    let mut grads = Vec::new();
    let first_linear = model.linear_layers().first().copied().unwrap_or(0);
    for (l, layer) in model.layers().iter().enumerate().rev() {
        let input = &trace.inputs[l];
        match layer.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let op = layer.spec.op().expect("linear");
                let w = layer.weights.as_ref().expect("linear layer has weights");
                let dense = matches!(layer.spec, LayerSpec::Dense { .. });
                let operand = if dense { model::augment(input) } else { input.clone() };
                grads.push(op.weight_grad(&delta, &operand, w.shape())?);
                if l > first_linear {
                    let g = op.input_grad(w, &delta, operand.shape())?;
                    delta = if dense { model::strip_augment(&g, input.shape())? } else { g };
                }
            }
            LayerSpec::Relu => delta = model::relu_backward(input, &delta)?,
            LayerSpec::MaxPool { .. } => {
                let arg = trace.argmax[l].as_ref().expect("pool trace");
                delta = model::max_pool_backward(&delta, arg, input.shape())?;
            }
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Mean loss and mean weight gradients over a batch.
pub fn plain_batch_gradient(
    model: &Model,
    inputs: &[Tensor],
    targets: &[Tensor],
    loss: Loss,
) -> Result<(f64, Vec<Tensor>)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::protocol(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
    }
    let n = inputs.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (x, t) in inputs.iter().zip(targets) {
        let (y, trace) = plain_forward(model, x)?;
        total += loss.value(&y, t)?;
        let g = plain_backward(model, &trace, &loss.grad(&y, t)?)?;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.add_scaled(1.0, gi)?;
                }
            }
        }
    }
    let grads = acc.expect("non-empty batch").into_iter().map(|g| g.scale(1.0 / n)).collect();
    Ok((total / n, grads))
}

/// Fraction of samples whose logits argmax matches the target argmax.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for (x, t) in data.inputs().iter().zip(data.targets()) {
        let (y, _) = plain_forward(model, x)?;
        hits += usize::from(y.argmax() == t.argmax());
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Plain SGD with the same batching and metrics as the split trainer.
#[derive(Debug, Clone)]
pub struct PlainTrainer {
    model: Model,
    cfg: TrainConfig,
    steps: usize,
}

impl PlainTrainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PlainTrainer { model, cfg, steps: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&mut self, inputs: &[Tensor], targets: &[Tensor], epoch: usize) -> Result<MetricRecord> {
        let (loss, grads) = plain_batch_gradient(&self.model, inputs, targets, self.cfg.loss)?;
        self.model.apply_sgd(&grads, self.cfg.eta)?;
        self.steps += 1;
        Ok(MetricRecord {
            step: self.steps,
            epoch,
            loss,
            grad_norm: aggregate_norm(&grads),
            integrity: IntegrityReport::Disabled,
        })
    }

    pub fn run(&mut self, data: &Dataset) -> Result<Vec<MetricRecord>> {
        let batch = self.cfg.batch_size();
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            for (x, t) in data.batches(batch) {
                history.push(self.step(x, t, epoch)?);
            }
        }
        Ok(history)
    }
}
