//! Redundant-equation integrity check and fault injection.
//!
//! With a `(K+2)×(K+1)` key the untrusted side returns one more output than
//! there are unknowns. The first `K+1` outputs are solved for
//! `u = [⟨W,x₀⟩ … ⟨W,x_{K−1}⟩, ⟨W,r⟩]`, the last row of `A` predicts the
//! extra output from `u`, and any disagreement above the threshold is a
//! violation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::BlindingKey;
use crate::tensor::Tensor;

use super::untrusted::UntrustedContext;

/// Default detection threshold for 64-bit arithmetic.
pub const DEFAULT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IntegrityStatus {
    Ok { max_residual: f64 },
    Violation { layer: usize, max_residual: f64 },
}

impl IntegrityStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, IntegrityStatus::Ok { .. })
    }

    pub fn max_residual(&self) -> f64 {
        match *self {
            IntegrityStatus::Ok { max_residual } | IntegrityStatus::Violation { max_residual, .. } => max_residual,
        }
    }

    /// Folds per-layer results; the first violation wins.
    pub fn combine(self, other: IntegrityStatus) -> IntegrityStatus {
        match (self, other) {
            (IntegrityStatus::Violation { .. }, _) => self,
            (IntegrityStatus::Ok { .. }, IntegrityStatus::Violation { .. }) => other,
            (IntegrityStatus::Ok { max_residual: a }, IntegrityStatus::Ok { max_residual: b }) => {
                IntegrityStatus::Ok { max_residual: a.max(b) }
            }
        }
    }
}

/// Integrity outcome as recorded in metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IntegrityReport {
    Disabled,
    Ok { max_residual: f64 },
    Violation { layer: usize, max_residual: f64 },
}

impl From<Option<IntegrityStatus>> for IntegrityReport {
    fn from(s: Option<IntegrityStatus>) -> Self {
        match s {
            None => IntegrityReport::Disabled,
            Some(IntegrityStatus::Ok { max_residual }) => IntegrityReport::Ok { max_residual },
            Some(IntegrityStatus::Violation { layer, max_residual }) => {
                IntegrityReport::Violation { layer, max_residual }
            }
        }
    }
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if !threshold.is_finite() || threshold < f64::EPSILON {
        return Err(Error::param(format!("integrity threshold must be finite and >= {:e}, got {threshold}", f64::EPSILON)));
    }
    Ok(())
}

/// `‖Σ_m A[K+1][m]·u_m − ȳ_{K+1}‖∞` where `u = A⁻¹·ȳ[0..=K]`.
pub fn integrity_residual(outputs: &[Tensor], key: &BlindingKey) -> Result<f64> {
    if !key.has_integrity_row() {
        return Err(Error::Key("key has no integrity row".into()));
    }
    let n = key.k() + 1;
    if outputs.len() != n + 1 {
        return Err(Error::protocol(format!("integrity check needs {} outputs, got {}", n + 1, outputs.len())));
    }
    // Prediction coefficients on the observed outputs: c_j = Σ_m A[K+1][m]·A⁻¹[m][j].
    let coeffs: Vec<f64> = (0..n).map(|j| propagation_factor_unchecked(key, j)).collect();
    let used: Vec<&Tensor> = outputs[..n].iter().collect();
    let predicted = Tensor::linear_combination(&coeffs, &used)?;
    Ok(predicted.sub(&outputs[n])?.max_abs())
}

pub fn verify_integrity(outputs: &[Tensor], key: &BlindingKey, threshold: f64, layer: usize) -> Result<IntegrityStatus> {
    validate_threshold(threshold)?;
    let max_residual = integrity_residual(outputs, key)?;
    Ok(if max_residual > threshold {
        IntegrityStatus::Violation { layer, max_residual }
    } else {
        IntegrityStatus::Ok { max_residual }
    })
}

fn propagation_factor_unchecked(key: &BlindingKey, equation: usize) -> f64 {
    let n = key.k() + 1;
    if equation == n {
        return 1.0;
    }
    (0..n).map(|m| key.a().at(n, m) * key.a_inv().at(m, equation)).sum()
}

/// How a perturbation of `ε` on output `equation` moves the residual: the
/// residual of a whole-tensor (or single-entry) tamper is `|ε|·|factor|`.
pub fn propagation_factor(key: &BlindingKey, equation: usize) -> Result<f64> {
    if !key.has_integrity_row() {
        return Err(Error::Key("key has no integrity row".into()));
    }
    if equation > key.k() + 1 {
        return Err(Error::protocol(format!("equation {equation} out of range for k={}", key.k())));
    }
    Ok(propagation_factor_unchecked(key, equation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Adds `epsilon` to one flat entry.
    Entry { index: usize, epsilon: f64 },
    /// Adds `epsilon` to every entry.
    Whole { epsilon: f64 },
}

impl Perturbation {
    pub fn epsilon(&self) -> f64 {
        match *self {
            Perturbation::Entry { epsilon, .. } | Perturbation::Whole { epsilon } => epsilon,
        }
    }
}

/// Adversarial modification of one untrusted output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamperPolicy {
    pub layer: usize,
    pub equation: usize,
    pub perturbation: Perturbation,
}

impl TamperPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.perturbation.epsilon().is_finite() {
            return Err(Error::param("tamper epsilon must be finite"));
        }
        Ok(())
    }

    pub(crate) fn apply(&self, output: &mut Tensor) -> Result<()> {
        match self.perturbation {
            Perturbation::Entry { index, epsilon } => {
                let n = output.numel();
                let slot = output
                    .data_mut()
                    .get_mut(index)
                    .ok_or_else(|| Error::protocol(format!("tamper entry {index} out of range for {n} entries")))?;
                *slot += epsilon;
            }
            Perturbation::Whole { epsilon } => {
                for v in output.data_mut() {
                    *v += epsilon;
                }
            }
        }
        Ok(())
    }
}

/// Installs `policy` on the untrusted context. Subsequent forward outputs of
/// the targeted layer and equation are perturbed.
pub fn inject_tamper(untrusted: &mut UntrustedContext, policy: TamperPolicy) -> Result<()> {
    policy.validate()?;
    match untrusted.model().layers().get(policy.layer) {
        None => Err(Error::param(format!(
            "tamper targets layer {} but the model has {} layers",
            policy.layer,
            untrusted.model().len()
        ))),
        Some(l) if !l.spec.is_linear() => {
            Err(Error::param(format!("tamper targets layer {} which is not linear", policy.layer)))
        }
        Some(_) => {
            untrusted.set_tamper(Some(policy));
            Ok(())
        }
    }
}
