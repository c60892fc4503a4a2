//! Naive reference kernels shared by the integration tests. Written as plain
//! loops over the defining sums so they share no code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use darknight::rng::{seeded_stream, DetRng, Gaussian};
use darknight::{BilinearOp, Tensor};
use rand::Rng;

pub fn rng(seed: u64) -> DetRng {
    seeded_stream(seed, 900)
}

pub fn uniform(shape: &[usize], rng: &mut DetRng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale)).unwrap()
}

pub fn gaussian(shape: &[usize], rng: &mut DetRng, sd: f64) -> Tensor {
    let mut g = Gaussian::new();
    Tensor::from_fn(shape, |_| g.sample(rng, 0.0, sd)).unwrap()
}

/// `‖a − b‖∞ / ‖b‖∞`, falling back to the absolute error when `b = 0`.
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// `w[m×n]·x[n]` or `w[m×n]·x[n×p]`.
pub fn matmul(w: &Tensor, x: &Tensor) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let p = if x.rank() == 1 { 1 } else { x.shape()[1] };
    assert_eq!(x.shape()[0], n);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..n {
                s += w.data()[i * n + k] * x.data()[k * p + j];
            }
            out[i * p + j] = s;
        }
    }
    out
}

fn padded(x: &Tensor, c: usize, y: isize, xx: isize) -> f64 {
    let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
    if y < 0 || xx < 0 || y >= h || xx >= w {
        0.0
    } else {
        x.data()[(c * h as usize + y as usize) * w as usize + xx as usize]
    }
}

pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Cross-correlation `out[o][i][j] = Σ_{c,a,b} w[o][c][a][b]·x[c][i·s+a−p][j·s+b−p]`.
pub fn conv(w: &Tensor, x: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [co, ci, kh, kw] = w.shape().try_into().unwrap();
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad));
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * stride + a) as isize - pad as isize;
                            let xx = (j * stride + b) as isize - pad as isize;
                            s += w.data()[((o * ci + c) * kh + a) * kw + b] * padded(x, c, y, xx);
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = s;
            }
        }
    }
    out
}

/// `∂/∂w[o][c][a][b] Σ δ ⊙ conv(w, x) = Σ_{i,j} δ[o][i][j]·x[c][i·s+a−p][j·s+b−p]`.
pub fn conv_weight_grad(delta: &Tensor, x: &Tensor, wshape: &[usize], stride: usize, pad: usize) -> Vec<f64> {
    let [co, ci, kh, kw] = wshape.try_into().unwrap();
    let (oh, ow) = (delta.shape()[1], delta.shape()[2]);
    let mut out = vec![0.0; co * ci * kh * kw];
    for o in 0..co {
        for c in 0..ci {
            for a in 0..kh {
                for b in 0..kw {
                    let mut s = 0.0;
                    for i in 0..oh {
                        for j in 0..ow {
                            let y = (i * stride + a) as isize - pad as isize;
                            let xx = (j * stride + b) as isize - pad as isize;
                            s += delta.data()[(o * oh + i) * ow + j] * padded(x, c, y, xx);
                        }
                    }
                    out[((o * ci + c) * kh + a) * kw + b] = s;
                }
            }
        }
    }
    out
}

/// `∂/∂x Σ δ ⊙ conv(w, x)`, scattered tap by tap.
pub fn conv_input_grad(w: &Tensor, delta: &Tensor, xshape: &[usize], stride: usize, pad: usize) -> Vec<f64> {
    let [co, ci, kh, kw] = w.shape().try_into().unwrap();
    let (h, wd) = (xshape[1], xshape[2]);
    let (oh, ow) = (delta.shape()[1], delta.shape()[2]);
    let mut out = vec![0.0; ci * h * wd];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                for c in 0..ci {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * stride + a) as isize - pad as isize;
                            let xx = (j * stride + b) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                out[(c * h + y as usize) * wd + xx as usize] +=
                                    delta.data()[(o * oh + i) * ow + j] * w.data()[((o * ci + c) * kh + a) * kw + b];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `⟨w, x⟩` by the naive kernels.
pub fn apply(op: BilinearOp, w: &Tensor, x: &Tensor) -> Vec<f64> {
    match op {
        BilinearOp::MatMul => matmul(w, x),
        BilinearOp::Conv2D { stride, padding } => conv(w, x, stride, padding),
    }
}

/// Weight gradient `⟨δ, x⟩` by the naive kernels (`δ·xᵀ` for vectors).
pub fn weight_grad(op: BilinearOp, delta: &Tensor, x: &Tensor, wshape: &[usize]) -> Vec<f64> {
    match op {
        BilinearOp::MatMul => {
            let (m, n) = (delta.numel(), x.numel());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = delta.data()[i] * x.data()[j];
                }
            }
            out
        }
        BilinearOp::Conv2D { stride, padding } => conv_weight_grad(delta, x, wshape, stride, padding),
    }
}

/// Dense system `m·v = rhs` by Gaussian elimination with partial pivoting.
pub fn solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut v = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * v[c]).sum();
        v[r] = (rhs[r] - s) / m[r][r];
    }
    v
}

/// A small random layer: `(op, weight shape, input shape)`. Convolutions
/// use stride 1 or 2 and padding 0 or 1 (below the kernel size), sized so the output is integral.
pub fn random_layer(conv: bool, rng: &mut DetRng) -> (BilinearOp, Vec<usize>, Vec<usize>) {
    if conv {
        let (co, ci, k, oh) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        // Padding narrower than the kernel so every output sees real input.
        let (stride, padding) = (rng.gen_range(1..=2), rng.gen_range(0..k.min(2)));
        let h = (oh - 1) * stride + k;
        (BilinearOp::Conv2D { stride, padding }, vec![co, ci, k, k], vec![ci, h, h])
    } else {
        let (o, i) = (rng.gen_range(1..6), rng.gen_range(1..8));
        (BilinearOp::MatMul, vec![o, i], vec![i])
    }
}
