//! Observation hooks on the trusted/untrusted boundary.
//!
//! The untrusted context reports every value it receives or produces to an
//! optional [`BoundaryObserver`]. The trusted context reports fingerprints
//! of the secrets it creates to an optional [`SecretAudit`]. Comparing the
//! two sets is how tests show that no raw activation, noise tensor or
//! coding matrix ever crosses over.

use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::tensor::Tensor;

/// What kind of value crossed into the untrusted context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossing {
    /// Model weights, resident on the untrusted side.
    Weights,
    /// A blinded activation `x̄` (stored for the backward pass).
    BlindedActivation,
    /// `⟨W, x̄⟩` returned to the trusted side.
    BlindedOutput,
    /// Public coefficient matrix `B`.
    PublicB,
    /// `Σ_i B[j][i]·δ[i]`.
    EncodedDelta,
    /// Coded weight-gradient equation.
    CodedProduct,
    /// `Wᵀ` applied to an encoded delta.
    InputGradCombination,
    /// Aggregated weight gradient sent for the update.
    WeightGradient,
}

pub trait BoundaryObserver: Send {
    fn observe_tensor(&mut self, kind: Crossing, tensor: &Tensor);

    /// Sealed gradient pages evicted to untrusted storage.
    fn observe_blob(&mut self, _bytes: &[u8]) {}
}

/// Secret material that must stay inside the trusted context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SecretKind {
    /// A raw (unblinded) layer input, including the augmented dense input.
    RawActivation,
    Noise,
    MixingMatrix,
    Gamma,
}

pub trait SecretAudit: Send {
    fn secret(&mut self, kind: SecretKind, fingerprint: [u8; 32]);
}

/// Shared-handle recorder of everything the untrusted side saw.
#[derive(Debug, Clone, Default)]
pub struct BoundaryRecorder {
    inner: Arc<Mutex<RecorderLog>>,
}

#[derive(Debug, Default)]
pub struct RecorderLog {
    pub tensors: Vec<(Crossing, Tensor)>,
    pub blobs: Vec<Vec<u8>>,
}

impl BoundaryRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_log<R>(&self, f: impl FnOnce(&RecorderLog) -> R) -> R {
        f(&self.inner.lock().expect("recorder lock poisoned"))
    }
}

impl BoundaryObserver for BoundaryRecorder {
    fn observe_tensor(&mut self, kind: Crossing, tensor: &Tensor) {
        self.inner.lock().expect("recorder lock poisoned").tensors.push((kind, tensor.clone()));
    }

    fn observe_blob(&mut self, bytes: &[u8]) {
        self.inner.lock().expect("recorder lock poisoned").blobs.push(bytes.to_vec());
    }
}

type Fingerprints = Vec<(SecretKind, [u8; 32])>;

/// Shared-handle list of secret fingerprints.
#[derive(Debug, Clone, Default)]
pub struct SecretLedger {
    inner: Arc<Mutex<Fingerprints>>,
}

impl SecretLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<(SecretKind, [u8; 32])> {
        self.inner.lock().expect("ledger lock poisoned").clone()
    }
}

impl SecretAudit for SecretLedger {
    fn secret(&mut self, kind: SecretKind, fingerprint: [u8; 32]) {
        self.inner.lock().expect("ledger lock poisoned").push((kind, fingerprint));
    }
}
