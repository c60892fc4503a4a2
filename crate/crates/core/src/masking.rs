//! Inference-side blinding.
//!
//! K inputs and one noise tensor `r` are mixed by a secret matrix `A`:
//!
//! ```text
//! x̄[i] = Σ_{j<K} A[i][j]·x[j] + A[i][K]·r        i = 0..=K
//! ```
//!
//! Column `K` of `A` always carries the noise coefficient. After the
//! untrusted side returns `ȳ[i] = ⟨W, x̄[i]⟩`, bilinearity gives
//! `ȳ[i] = Σ_j A[i][j]·⟨W, x[j]⟩` (with `x[K] = r`), so the true outputs are
//! `y[i] = Σ_j A⁻¹[i][j]·ȳ[j]` and the `⟨W, r⟩` term is dropped.
//!
//! A key may carry one extra row (`K+2` rows in total) used only for
//! integrity checking; see [`crate::pipeline::integrity`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, DetRng, Gaussian};
use crate::tensor::Tensor;

/// Gaussian noise distribution for `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mean: f64,
    pub variance: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(mean: f64, variance: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { mean, variance, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::param(format!("noise variance must be > 0, got {}", self.variance)));
        }
        if !self.mean.is_finite() {
            return Err(Error::param("noise mean must be finite"));
        }
        Ok(())
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub(crate) fn sample(&self, shape: &[usize], rng: &mut DetRng) -> Result<Tensor> {
        let mut g = Gaussian::new();
        let sd = self.std_dev();
        Tensor::from_fn(shape, |_| g.sample(rng, self.mean, sd))
    }
}

/// Secret per-virtual-batch blinding material.
#[derive(Debug, Clone)]
pub struct BlindingKey {
    k: usize,
    a: Tensor,
    a_inv: Tensor,
    noise: Tensor,
}

impl BlindingKey {
    /// Builds a key from an explicit coefficient matrix. `a` must be
    /// `(K+1)×(K+1)`, or `(K+2)×(K+1)` with an integrity row; its top square
    /// block must be invertible.
    pub fn from_parts(a: Tensor, noise: Tensor) -> Result<Self> {
        if a.rank() != 2 {
            return Err(Error::Key(format!("A must be a matrix, got {:?}", a.shape())));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        if cols < 2 || (rows != cols && rows != cols + 1) {
            return Err(Error::Key(format!(
                "A must be (K+1)x(K+1) or (K+2)x(K+1) with K >= 1, got {rows}x{cols}"
            )));
        }
        let top = if rows == cols {
            a.clone()
        } else {
            Tensor::new(vec![cols, cols], a.data()[..cols * cols].to_vec())?
        };
        let a_inv = linalg::inverse(&top)?;
        Ok(BlindingKey { k: cols - 1, a, a_inv, noise })
    }

    pub(crate) fn generate(
        k: usize,
        input_shape: &[usize],
        noise: &NoiseSpec,
        integrity: bool,
        a_rng: &mut DetRng,
        noise_rng: &mut DetRng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("virtual batch size k must be >= 1"));
        }
        let square = linalg::random_orthogonal(k + 1, a_rng, &mut Gaussian::new())?;
        BlindingKey::with_square(square, input_shape, noise, integrity, a_rng, noise_rng)
    }

    /// Key over a given square `A`, optionally extended by a fresh integrity
    /// row, with fresh noise.
    pub(crate) fn with_square(
        square: Tensor,
        input_shape: &[usize],
        noise: &NoiseSpec,
        integrity: bool,
        a_rng: &mut DetRng,
        noise_rng: &mut DetRng,
    ) -> Result<Self> {
        noise.validate()?;
        let n = square.shape()[0];
        let a = if integrity {
            let extra = integrity_row(n, a_rng, &mut Gaussian::new());
            let mut data = square.into_data();
            data.extend(extra);
            Tensor::new(vec![n + 1, n], data)?
        } else {
            square
        };
        let r = noise.sample(input_shape, noise_rng)?;
        BlindingKey::from_parts(a, r)
    }

    /// Virtual batch size K.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Coefficient matrix, `(K+1)` or `(K+2)` rows by `K+1` columns.
    pub fn a(&self) -> &Tensor {
        &self.a
    }

    /// Inverse of the top `(K+1)×(K+1)` block of `a`.
    pub fn a_inv(&self) -> &Tensor {
        &self.a_inv
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    pub fn rows(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn has_integrity_row(&self) -> bool {
        self.rows() == self.k + 2
    }

    /// κ₂ of the square block.
    pub fn condition_number(&self) -> Result<f64> {
        linalg::cond2(&self.a_inv).map(|c| c.max(1.0))
    }

    /// `‖A·A⁻¹ − I‖∞` over the square block.
    pub fn inverse_residual(&self) -> Result<f64> {
        let n = self.k + 1;
        let top = Tensor::new(vec![n, n], self.a.data()[..n * n].to_vec())?;
        linalg::identity_residual(&top, &self.a_inv)
    }
}

/// Unit-norm Gaussian row for the redundant equation.
fn integrity_row(n: usize, rng: &mut DetRng, g: &mut Gaussian) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..n).map(|_| g.standard(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return row.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Generates a key with a random orthogonal `A` and noise `r ~ 𝒩(μ, σ²)`
/// shaped like one input. Deterministic in `(k, input_shape, noise, rng_seed)`.
pub fn generate_blinding_key(
    k: usize,
    input_shape: &[usize],
    noise: &NoiseSpec,
    rng_seed: u64,
) -> Result<BlindingKey> {
    let (mut a_rng, mut n_rng) = key_streams(noise, rng_seed);
    BlindingKey::generate(k, input_shape, noise, false, &mut a_rng, &mut n_rng)
}

/// Like [`generate_blinding_key`] but with a `(K+2)`-th integrity row.
pub fn generate_integrity_key(
    k: usize,
    input_shape: &[usize],
    noise: &NoiseSpec,
    rng_seed: u64,
) -> Result<BlindingKey> {
    let (mut a_rng, mut n_rng) = key_streams(noise, rng_seed);
    BlindingKey::generate(k, input_shape, noise, true, &mut a_rng, &mut n_rng)
}

fn key_streams(noise: &NoiseSpec, rng_seed: u64) -> (DetRng, DetRng) {
    (
        rng::seeded_stream(rng_seed, 1),
        rng::seeded_stream(noise.seed ^ rng_seed.rotate_left(32), 2),
    )
}

/// The blinded inputs handed to the untrusted context.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedBatch {
    blinded: Vec<Tensor>,
    k: usize,
    integrity: bool,
}

impl CodedBatch {
    pub fn new(blinded: Vec<Tensor>, k: usize, integrity: bool) -> Result<Self> {
        let expected = k + 1 + usize::from(integrity);
        if blinded.len() != expected {
            return Err(Error::protocol(format!(
                "coded batch for k={k} needs {expected} tensors, got {}",
                blinded.len()
            )));
        }
        if let Some(first) = blinded.first() {
            for t in &blinded[1..] {
                first.same_shape(t)?;
            }
        }
        Ok(CodedBatch { blinded, k, integrity })
    }

    pub fn blinded(&self) -> &[Tensor] {
        &self.blinded
    }

    pub fn into_blinded(self) -> Vec<Tensor> {
        self.blinded
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn integrity(&self) -> bool {
        self.integrity
    }

    pub fn len(&self) -> usize {
        self.blinded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blinded.is_empty()
    }
}

pub fn blind(inputs: &[Tensor], key: &BlindingKey) -> Result<CodedBatch> {
    if inputs.len() != key.k {
        return Err(Error::protocol(format!(
            "key is for k={}, got {} inputs",
            key.k,
            inputs.len()
        )));
    }
    for x in inputs {
        x.same_shape(&key.noise).map_err(|_| {
            Error::dim(format!(
                "input shape {:?} does not match noise shape {:?}",
                x.shape(),
                key.noise.shape()
            ))
        })?;
    }
    let mut operands: Vec<&Tensor> = inputs.iter().collect();
    operands.push(&key.noise);
    let cols = key.k + 1;
    let blinded = (0..key.rows())
        .map(|i| Tensor::linear_combination(&key.a.data()[i * cols..(i + 1) * cols], &operands))
        .collect::<Result<Vec<_>>>()?;
    CodedBatch::new(blinded, key.k, key.has_integrity_row())
}

/// Recovers the K true outputs from `K+1` (or `K+2`) blinded outputs.
/// Only the first `K+1` are used.
pub fn unblind(outputs: &[Tensor], key: &BlindingKey) -> Result<Vec<Tensor>> {
    let cols = key.k + 1;
    if outputs.len() != cols && outputs.len() != key.rows() {
        return Err(Error::protocol(format!(
            "expected {} blinded outputs for k={}, got {}",
            cols,
            key.k,
            outputs.len()
        )));
    }
    let used: Vec<&Tensor> = outputs[..cols].iter().collect();
    (0..key.k)
        .map(|i| Tensor::linear_combination(&key.a_inv.data()[i * cols..(i + 1) * cols], &used))
        .collect()
}
