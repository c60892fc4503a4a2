//! Small dense linear algebra on (K+1)×(K+1) coefficient matrices, backed by
//! nalgebra. Only the blinding/coding matrices pass through here; layer
//! products stay in [`crate::tensor`].

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Gaussian;
use crate::tensor::Tensor;

/// Matrices with κ₂ above this are treated as singular.
const SINGULAR_COND: f64 = 1e14;

pub fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::dim(format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Tensor> {
    let (r, c) = m.shape();
    Tensor::from_fn(&[r, c], |i| m[(i / c, i % c)])
}

/// Standard Gaussian `rows × cols` matrix.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng, g: &mut Gaussian) -> DMatrix<f64> {
    // Row-major fill keeps the sample order independent of nalgebra's layout.
    let data: Vec<f64> = (0..rows * cols).map(|_| g.standard(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of Q sign-corrected so that R has a positive diagonal.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng, g: &mut Gaussian) -> Result<Tensor> {
    let qr = gaussian_matrix(n, n, rng, g).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_dmatrix(&q)
}

pub fn singular_values(t: &Tensor) -> Result<Vec<f64>> {
    let m = to_dmatrix(t)?;
    Ok(m.singular_values().iter().copied().collect())
}

/// 2-norm condition number σ_max / σ_min.
pub fn cond2(t: &Tensor) -> Result<f64> {
    let sv = singular_values(t)?;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if min == 0.0 { f64::INFINITY } else { max / min })
}

pub fn inverse(t: &Tensor) -> Result<Tensor> {
    let m = to_dmatrix(t)?;
    if !m.is_square() {
        return Err(Error::Key(format!("cannot invert non-square {:?}", t.shape())));
    }
    let kappa = cond2(t)?;
    if !kappa.is_finite() || kappa > SINGULAR_COND {
        return Err(Error::Key(format!("matrix is singular (cond {kappa:e})")));
    }
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::Key("matrix is singular".into()))?;
    from_dmatrix(&inv)
}

/// `(BᵀB)⁻¹Bᵀ` for a full-column-rank `B`.
pub fn left_inverse(b: &Tensor) -> Result<Tensor> {
    let m = to_dmatrix(b)?;
    let gram = m.transpose() * &m;
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Key("matrix is not full column rank".into()))?;
    from_dmatrix(&(gram_inv * m.transpose()))
}

/// `‖a·b − I‖∞` (max-abs entry).
pub fn identity_residual(a: &Tensor, b: &Tensor) -> Result<f64> {
    let p = to_dmatrix(a)? * to_dmatrix(b)?;
    if !p.is_square() {
        return Err(Error::dim("identity residual of a non-square product"));
    }
    let n = p.nrows();
    Ok((p - DMatrix::<f64>::identity(n, n)).amax())
}
