//! In-memory datasets and the built-in synthetic generators.

use crate::error::{Error, Result};
use crate::leakage::{normalize_inputs, Norm};
use crate::rng::{self, Gaussian};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::param("dataset is empty"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::dim(format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        for t in inputs[1..].iter() {
            inputs[0].same_shape(t)?;
        }
        for t in targets[1..].iter() {
            targets[0].same_shape(t)?;
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Tensor] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    /// Consecutive mini-batches in dataset order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (&[Tensor], &[Tensor])> {
        let size = batch_size.max(1);
        self.inputs.chunks(size).zip(self.targets.chunks(size))
    }
}

fn one_hot(class: usize, classes: usize) -> Tensor {
    Tensor::from_fn(&[classes], |i| if i == class { 1.0 } else { 0.0 }).expect("finite")
}

pub const BLOB_DIM: usize = 4;

/// `n` points in `BLOB_DIM` dimensions from two Gaussian blobs centred at
/// `±(1,…,1)` with unit-ish spread, alternating class, L2-normalized.
/// Targets are one-hot over two classes.
pub fn synthetic_blobs(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("blob dataset needs at least one sample"));
    }
    let mut rng = rng::seeded_stream(seed, 40);
    let mut g = Gaussian::new();
    let mut raw = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let centre = if class == 0 { 1.0 } else { -1.0 };
        raw.push(Tensor::from_fn(&[BLOB_DIM], |_| g.sample(&mut rng, centre, 0.6))?);
        targets.push(one_hot(class, 2));
    }
    let (inputs, _) = normalize_inputs(&raw, Norm::L2)?;
    Dataset::new(inputs, targets)
}

/// The four XOR points on `{±1}²`, L2-normalized, with one-hot targets
/// (class 1 when the signs differ).
pub fn synthetic_xor() -> Result<Dataset> {
    let points = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
    let raw: Vec<Tensor> = points.iter().map(|&(a, b)| Tensor::vector(vec![a, b])).collect::<Result<_>>()?;
    let targets = points
        .iter()
        .map(|&(a, b)| one_hot(usize::from((a > 0.0) != (b > 0.0)), 2))
        .collect();
    let (inputs, _) = normalize_inputs(&raw, Norm::L2)?;
    Dataset::new(inputs, targets)
}
