//! Training-side coding of weight gradients.
//!
//! The untrusted side forms K+1 coded equations
//!
//! ```text
//! Eq[j] = ⟨ Σ_i B[j][i]·δ[i] , x̄[j] ⟩
//! ```
//!
//! from public `B` and the blinded activations `x̄` it stored in the forward
//! pass. With `x̄[j] = Σ_m A[j][m]·x[m]` (and `x[K] = r`),
//!
//! ```text
//! Σ_j γ_j·Eq[j] = Σ_{i,m} (BᵀΓA)[i][m]·⟨δ[i], x[m]⟩
//! ```
//!
//! so when `BᵀΓA = [I_K | 0]` the weighted sum is the batch gradient sum and
//! the noise column vanishes. `A` and `Γ` stay in the trusted context.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, DetRng, Gaussian};
use crate::tensor::{BilinearOp, Tensor};

/// `(A, Γ, B)` with `BᵀΓA = [I_K | 0]`.
#[derive(Debug, Clone)]
pub struct GradCodec {
    k: usize,
    a: Tensor,
    gamma: Vec<f64>,
    b: Tensor,
}

impl GradCodec {
    /// Solves `Bᵀ = M·A⁻¹·Γ⁻¹` for the given secret `A` and diagonal `Γ`.
    pub fn from_parts(a: Tensor, gamma: Vec<f64>) -> Result<Self> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] || a.shape()[0] < 2 {
            return Err(Error::Key(format!("A must be (K+1)x(K+1), got {:?}", a.shape())));
        }
        let n = a.shape()[0];
        if gamma.len() != n {
            return Err(Error::Key(format!("need {n} gamma entries, got {}", gamma.len())));
        }
        if gamma.iter().any(|g| *g == 0.0 || !g.is_finite()) {
            return Err(Error::Key("gamma entries must be finite and non-zero".into()));
        }
        let a_inv = linalg::inverse(&a)?;
        let k = n - 1;
        // B[j][i] = (Bᵀ)[i][j] = A⁻¹[i][j] / γ_j for i < K.
        let b = Tensor::from_fn(&[n, k], |idx| {
            let (j, i) = (idx / k, idx % k);
            a_inv.at(i, j) / gamma[j]
        })?;
        Ok(GradCodec { k, a, gamma, b })
    }

    pub(crate) fn generate(k: usize, rng: &mut DetRng) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("virtual batch size k must be >= 1"));
        }
        let a = linalg::random_orthogonal(k + 1, rng, &mut Gaussian::new())?;
        let gamma = (0..=k)
            .map(|_| {
                let mag: f64 = rng.gen_range(0.5..=2.0);
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        GradCodec::from_parts(a, gamma)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Secret mixing matrix; the same `A` must blind the layer's activations.
    pub fn a(&self) -> &Tensor {
        &self.a
    }

    /// Secret diagonal of `Γ`.
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Public `(K+1)×K` matrix of β coefficients.
    pub fn b(&self) -> &Tensor {
        &self.b
    }

    /// `‖BᵀΓA − [I_K | 0]‖∞`.
    pub fn constraint_residual(&self) -> f64 {
        let n = self.k + 1;
        let mut worst: f64 = 0.0;
        for i in 0..self.k {
            for m in 0..n {
                let v: f64 = (0..n).map(|j| self.b.at(j, i) * self.gamma[j] * self.a.at(j, m)).sum();
                let target = if i == m { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Random orthogonal `A`, random `Γ` with `|γ_j| ∈ [0.5, 2]`, and the
/// matching `B`. Deterministic in `(k, rng_seed)`.
pub fn generate_grad_codec(k: usize, rng_seed: u64) -> Result<GradCodec> {
    GradCodec::generate(k, &mut rng::seeded_stream(rng_seed, 3))
}

/// The K+1 untrusted-side gradient products.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedGradEquations {
    eqs: Vec<Tensor>,
}

impl CodedGradEquations {
    pub fn new(eqs: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = eqs.first() {
            for e in &eqs[1..] {
                first.same_shape(e)?;
            }
        }
        Ok(CodedGradEquations { eqs })
    }

    pub fn eqs(&self) -> &[Tensor] {
        &self.eqs
    }

    pub fn len(&self) -> usize {
        self.eqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eqs.is_empty()
    }
}

fn check_b(b: &Tensor) -> Result<(usize, usize)> {
    match *b.shape() {
        [rows, k] if rows == k + 1 && k >= 1 => Ok((rows, k)),
        _ => Err(Error::dim(format!("B must be (K+1)xK, got {:?}", b.shape()))),
    }
}

/// `out[j] = Σ_i B[j][i]·δ[i]`. Needs only the public `B`.
pub fn encode_deltas(deltas: &[Tensor], b: &Tensor) -> Result<Vec<Tensor>> {
    let (rows, k) = check_b(b)?;
    if deltas.len() != k {
        return Err(Error::protocol(format!("B is for k={k}, got {} deltas", deltas.len())));
    }
    let refs: Vec<&Tensor> = deltas.iter().collect();
    (0..rows)
        .map(|j| Tensor::linear_combination(&b.data()[j * k..(j + 1) * k], &refs))
        .collect()
}

/// Inverts [`encode_deltas`] with the left inverse of `B`: given
/// `z[j] = Σ_i B[j][i]·u[i]` returns the K tensors `u[i]`.
pub fn decode_combinations(z: &[Tensor], b: &Tensor) -> Result<Vec<Tensor>> {
    let (rows, k) = check_b(b)?;
    if z.len() != rows {
        return Err(Error::protocol(format!("expected {rows} combinations, got {}", z.len())));
    }
    let left = linalg::left_inverse(b)?;
    let refs: Vec<&Tensor> = z.iter().collect();
    (0..k)
        .map(|i| Tensor::linear_combination(&left.data()[i * rows..(i + 1) * rows], &refs))
        .collect()
}

/// `eqs[j] = ⟨encoded[j], blinded[j]⟩` in the weight-gradient sense of `op`.
pub fn coded_products(
    encoded_deltas: &[Tensor],
    blinded_inputs: &[Tensor],
    op: BilinearOp,
    weight_shape: &[usize],
) -> Result<CodedGradEquations> {
    if encoded_deltas.len() != blinded_inputs.len() || encoded_deltas.len() < 2 {
        return Err(Error::protocol(format!(
            "{} encoded deltas vs {} blinded inputs",
            encoded_deltas.len(),
            blinded_inputs.len()
        )));
    }
    let eqs = encoded_deltas
        .iter()
        .zip(blinded_inputs)
        .map(|(d, x)| op.weight_grad(d, x, weight_shape))
        .collect::<Result<Vec<_>>>()?;
    CodedGradEquations::new(eqs)
}

/// `(1/K)·Σ_j γ_j·Eq[j]`, the batch-mean weight gradient.
pub fn decode_grad(eqs: &CodedGradEquations, codec: &GradCodec) -> Result<Tensor> {
    if eqs.len() != codec.k + 1 {
        return Err(Error::protocol(format!(
            "codec is for k={}, got {} equations",
            codec.k,
            eqs.len()
        )));
    }
    let inv_k = 1.0 / codec.k as f64;
    let weights: Vec<f64> = codec.gamma.iter().map(|g| g * inv_k).collect();
    let refs: Vec<&Tensor> = eqs.eqs.iter().collect();
    Tensor::linear_combination(&weights, &refs)
}
