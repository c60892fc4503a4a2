//! The accelerator side: holds the weights and evaluates bilinear products
//! on blinded or encoded operands only.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grad_codec::{self, CodedGradEquations};
use crate::masking::CodedBatch;
use crate::tensor::{BilinearOp, Tensor};

use super::boundary::{BoundaryObserver, Crossing};
use super::integrity::TamperPolicy;
use super::model::Model;

pub struct UntrustedContext {
    model: Model,
    stored: HashMap<(u64, usize), Vec<Tensor>>,
    pages: HashMap<u64, Vec<u8>>,
    tamper: Option<TamperPolicy>,
    observer: Option<Box<dyn BoundaryObserver>>,
}

impl std::fmt::Debug for UntrustedContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UntrustedContext")
            .field("layers", &self.model.len())
            .field("stored", &self.stored.len())
            .field("pages", &self.pages.len())
            .field("tamper", &self.tamper)
            .finish()
    }
}

impl UntrustedContext {
    pub fn new(model: Model) -> Self {
        UntrustedContext { model, stored: HashMap::new(), pages: HashMap::new(), tamper: None, observer: None }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Attaches an observer and reports the resident weights to it.
    pub fn set_observer(&mut self, observer: Box<dyn BoundaryObserver>) {
        self.observer = Some(observer);
        self.observe_weights();
    }

    pub fn tamper(&self) -> Option<&TamperPolicy> {
        self.tamper.as_ref()
    }

    pub(crate) fn set_tamper(&mut self, policy: Option<TamperPolicy>) {
        self.tamper = policy;
    }

    pub fn clear_tamper(&mut self) {
        self.tamper = None;
    }

    fn observe(&mut self, kind: Crossing, t: &Tensor) {
        if let Some(o) = self.observer.as_mut() {
            o.observe_tensor(kind, t);
        }
    }

    fn observe_weights(&mut self) {
        if let Some(o) = self.observer.as_mut() {
            for w in self.model.parameters() {
                o.observe_tensor(Crossing::Weights, w);
            }
        }
    }

    fn linear(&self, layer: usize) -> Result<(BilinearOp, &Tensor)> {
        let l = self
            .model
            .layers()
            .get(layer)
            .ok_or_else(|| Error::protocol(format!("no layer {layer}")))?;
        match (l.spec.op(), l.weights.as_ref()) {
            (Some(op), Some(w)) => Ok((op, w)),
            _ => Err(Error::protocol(format!("layer {layer} is not linear"))),
        }
    }

    /// `ȳ[j] = ⟨W, x̄[j]⟩` for every blinded operand. When `store` is set the
    /// first `K+1` operands are kept for the backward pass of `batch`.
    pub fn linear_forward(&mut self, batch: u64, layer: usize, coded: CodedBatch, store: bool) -> Result<Vec<Tensor>> {
        for x in coded.blinded() {
            self.observe(Crossing::BlindedActivation, x);
        }
        let (op, w) = self.linear(layer)?;
        let mut outs = coded
            .blinded()
            .iter()
            .map(|x| op.apply(w, x))
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = self.tamper.filter(|p| p.layer == layer) {
            let n = outs.len();
            let target = outs
                .get_mut(p.equation)
                .ok_or_else(|| Error::protocol(format!("tamper targets equation {} of {n}", p.equation)))?;
            p.apply(target)?;
        }
        for y in &outs {
            self.observe(Crossing::BlindedOutput, y);
        }
        if store {
            let k = coded.k();
            let mut blinded = coded.into_blinded();
            blinded.truncate(k + 1);
            self.stored.insert((batch, layer), blinded);
        }
        Ok(outs)
    }

    /// Coded weight-gradient equations from the stored blinded activations.
    pub fn weight_grad_equations(
        &mut self,
        batch: u64,
        layer: usize,
        b: &Tensor,
        encoded: &[Tensor],
    ) -> Result<CodedGradEquations> {
        self.observe(Crossing::PublicB, b);
        for e in encoded {
            self.observe(Crossing::EncodedDelta, e);
        }
        let (op, w) = self.linear(layer)?;
        let shape = w.shape().to_vec();
        let stored = self
            .stored
            .get(&(batch, layer))
            .ok_or_else(|| Error::protocol(format!("no stored activations for batch {batch}, layer {layer}")))?;
        let eqs = grad_codec::coded_products(encoded, stored, op, &shape)?;
        for e in eqs.eqs() {
            self.observe(Crossing::CodedProduct, e);
        }
        Ok(eqs)
    }

    /// `Wᵀ` applied to each encoded delta, shaped like the layer operand.
    pub fn input_grad_combinations(&mut self, layer: usize, encoded: &[Tensor], operand_shape: &[usize]) -> Result<Vec<Tensor>> {
        let (op, w) = self.linear(layer)?;
        let out = encoded
            .iter()
            .map(|e| op.input_grad(w, e, operand_shape))
            .collect::<Result<Vec<_>>>()?;
        for z in &out {
            self.observe(Crossing::InputGradCombination, z);
        }
        Ok(out)
    }

    pub fn store_page(&mut self, id: u64, blob: Vec<u8>) {
        if let Some(o) = self.observer.as_mut() {
            o.observe_blob(&blob);
        }
        self.pages.insert(id, blob);
    }

    pub fn load_page(&mut self, id: u64) -> Result<Vec<u8>> {
        self.pages.remove(&id).ok_or_else(|| Error::protocol(format!("no page {id}")))
    }

    /// `W ← W − η·∇W` with gradients in linear-layer order.
    pub fn apply_update(&mut self, grads: &[Tensor], eta: f64) -> Result<()> {
        for g in grads {
            self.observe(Crossing::WeightGradient, g);
        }
        self.model.apply_sgd(grads, eta)?;
        self.observe_weights();
        Ok(())
    }

    /// Drops everything stored for `batch`.
    pub fn release(&mut self, batch: u64) {
        self.stored.retain(|(b, _), _| *b != batch);
    }

    pub fn stored_batches(&self) -> usize {
        let mut ids: Vec<u64> = self.stored.keys().map(|(b, _)| *b).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}
