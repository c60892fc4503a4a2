//! Forward and backward passes across the trusted/untrusted split.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grad_codec::{decode_combinations, decode_grad, encode_deltas};
use crate::masking::{blind, unblind};
use crate::tensor::Tensor;

use super::boundary::SecretKind;
use super::integrity::{verify_integrity, IntegrityStatus};
use super::model::{self, LayerSpec};
use super::trusted::{LayerTrace, Session, TrustedContext};
use super::untrusted::UntrustedContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No backward pass follows; nothing is stored.
    Inference,
    /// Blinded activations and codecs are kept for [`backward_split`].
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerResidual {
    pub layer: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Handle for the matching [`backward_split`] call.
    pub batch: u64,
    pub logits: Vec<Tensor>,
    /// `None` when the integrity row is disabled.
    pub integrity: Option<IntegrityStatus>,
    pub residuals: Vec<LayerResidual>,
}

/// Runs K inputs through the model. Linear layers are evaluated by the
/// untrusted side on blinded operands; everything else stays trusted.
pub fn forward_split(
    inputs: &[Tensor],
    trusted: &mut TrustedContext,
    untrusted: &mut UntrustedContext,
    mode: Mode,
) -> Result<ForwardOutput> {
    let k = inputs.len();
    if k == 0 {
        return Err(Error::param("virtual batch is empty"));
    }
    for x in &inputs[1..] {
        inputs[0].same_shape(x)?;
    }
    if trusted.specs() != untrusted.model().specs().as_slice() {
        return Err(Error::protocol("trusted and untrusted contexts hold different architectures"));
    }
    let output_shape = untrusted.model().check_input(inputs[0].shape())?;
    let specs = trusted.specs().to_vec();
    let training = mode == Mode::Training;
    let batch = trusted.next_batch_id();

    let mut acts = inputs.to_vec();
    let mut traces = Vec::with_capacity(specs.len());
    let mut integrity: Option<IntegrityStatus> = None;
    let mut residuals = Vec::new();

    for (l, spec) in specs.iter().enumerate() {
        for a in &acts {
            trusted.audit(SecretKind::RawActivation, a);
        }
        let input_shape = acts[0].shape().to_vec();
        match *spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let dense = matches!(spec, LayerSpec::Dense { .. });
                let operands: Vec<Tensor> = if dense { acts.iter().map(model::augment).collect() } else { acts };
                if dense {
                    for o in &operands {
                        trusted.audit(SecretKind::RawActivation, o);
                    }
                }
                let operand_shape = operands[0].shape().to_vec();
                let (key, codec) = trusted.layer_secrets(k, &operand_shape, training)?;
                let coded = blind(&operands, &key)?;
                let outs = untrusted.linear_forward(batch, l, coded, training)?;
                if trusted.integrity() {
                    let status = verify_integrity(&outs, &key, trusted.threshold(), l)?;
                    residuals.push(LayerResidual { layer: l, residual: status.max_residual() });
                    integrity = Some(match integrity {
                        None => status,
                        Some(prev) => prev.combine(status),
                    });
                }
                acts = unblind(&outs, &key)?;
                traces.push(LayerTrace::Linear { codec, operand_shape, input_shape });
            }
            LayerSpec::Relu => {
                let next = acts.iter().map(model::relu).collect();
                traces.push(LayerTrace::Relu { inputs: std::mem::replace(&mut acts, next) });
            }
            LayerSpec::MaxPool { size, stride } => {
                let mut argmax = Vec::with_capacity(k);
                let mut next = Vec::with_capacity(k);
                for a in &acts {
                    let (y, arg) = model::max_pool(a, size, stride)?;
                    next.push(y);
                    argmax.push(arg);
                }
                acts = next;
                traces.push(LayerTrace::Pool { argmax, input_shape });
            }
        }
    }

    if training {
        trusted.open_session(batch, Session { k, output_shape, layers: traces });
    }
    Ok(ForwardOutput { batch, logits: acts, integrity, residuals })
}

/// Weight gradients `(1/K)·Σ_i ⟨δ_i, x_i⟩` for every linear layer, in forward
/// order, from the per-sample loss gradients of a training forward pass.
pub fn backward_split(
    batch: u64,
    loss_grads: &[Tensor],
    trusted: &mut TrustedContext,
    untrusted: &mut UntrustedContext,
) -> Result<Vec<Tensor>> {
    let session = trusted.take_session(batch)?;
    let result = run_backward(batch, session, loss_grads, untrusted);
    untrusted.release(batch);
    result
}

fn run_backward(batch: u64, session: Session, loss_grads: &[Tensor], untrusted: &mut UntrustedContext) -> Result<Vec<Tensor>> {
    if loss_grads.len() != session.k {
        return Err(Error::protocol(format!("batch has {} samples, got {} loss gradients", session.k, loss_grads.len())));
    }
    for g in loss_grads {
        if g.shape() != session.output_shape.as_slice() {
            return Err(Error::dim(format!("loss gradient {:?} vs output {:?}", g.shape(), session.output_shape)));
        }
    }
    let first_linear = session
        .layers
        .iter()
        .position(|t| matches!(t, LayerTrace::Linear { .. }))
        .unwrap_or(0);
    let mut deltas = loss_grads.to_vec();
    let mut grads = Vec::new();
    for (l, trace) in session.layers.iter().enumerate().rev() {
        match trace {
            LayerTrace::Linear { codec, operand_shape, input_shape } => {
                let codec = codec.as_ref().ok_or_else(|| Error::protocol("forward pass ran without a codec"))?;
                let encoded = encode_deltas(&deltas, codec.b())?;
                let eqs = untrusted.weight_grad_equations(batch, l, codec.b(), &encoded)?;
                grads.push(decode_grad(&eqs, codec)?);
                if l > first_linear {
                    let z = untrusted.input_grad_combinations(l, &encoded, operand_shape)?;
                    let per_sample = decode_combinations(&z, codec.b())?;
                    deltas = if operand_shape != input_shape {
                        per_sample.iter().map(|g| model::strip_augment(g, input_shape)).collect::<Result<_>>()?
                    } else {
                        per_sample
                    };
                }
            }
            LayerTrace::Relu { inputs } => {
                deltas = inputs.iter().zip(&deltas).map(|(x, d)| model::relu_backward(x, d)).collect::<Result<_>>()?;
            }
            LayerTrace::Pool { argmax, input_shape } => {
                deltas = argmax
                    .iter()
                    .zip(&deltas)
                    .map(|(arg, d)| model::max_pool_backward(d, arg, input_shape))
                    .collect::<Result<_>>()?;
            }
        }
    }
    grads.reverse();
    Ok(grads)
}
