//! Layer specifications, models, nonlinear layer kernels and the on-disk
//! model manifest.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, DType};
use crate::rng;
use crate::tensor::{BilinearOp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected. The input is flattened and augmented with a trailing
    /// 1, so the weight is `outputs × (inputs + 1)` with the bias in the
    /// last column.
    Dense { inputs: usize, outputs: usize },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool { size: usize, stride: usize },
}

impl LayerSpec {
    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn op(&self) -> Option<BilinearOp> {
        match *self {
            LayerSpec::Dense { .. } => Some(BilinearOp::MatMul),
            LayerSpec::Conv2d { stride, padding, .. } => Some(BilinearOp::Conv2D { stride, padding }),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some(vec![outputs, inputs + 1]),
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                Some(vec![out_channels, in_channels, kernel_h, kernel_w])
            }
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, kernel_h, kernel_w, .. } => in_channels * kernel_h * kernel_w,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, .. } => {
                in_channels > 0 && out_channels > 0 && kernel_h > 0 && kernel_w > 0 && stride > 0
            }
            LayerSpec::Relu => true,
            LayerSpec::MaxPool { size, stride } => size > 0 && stride > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid layer spec {self:?}")))
        }
    }

    /// Shape of the tensor actually multiplied by the weights: the flattened,
    /// augmented vector for dense layers, the input itself for convolutions.
    pub fn operand_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, .. } => {
                let n: usize = input_shape.iter().product();
                if n != inputs {
                    return Err(Error::dim(format!("dense layer expects {inputs} inputs, got shape {input_shape:?}")));
                }
                Ok(vec![inputs + 1])
            }
            _ => Ok(input_shape.to_vec()),
        }
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { outputs, .. } => {
                self.operand_shape(input_shape)?;
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                let probe_w = Tensor::zeros(&[out_channels, in_channels, kernel_h, kernel_w]);
                let probe_x = Tensor::zeros(input_shape);
                // Cheap at desk scale and reuses the exact shape rules of conv2d.
                Ok(crate::tensor::conv2d(&probe_w, &probe_x, stride, padding)?.shape().to_vec())
            }
            LayerSpec::Relu => Ok(input_shape.to_vec()),
            LayerSpec::MaxPool { size, stride } => pool_shape(input_shape, size, stride),
        }
    }
}

/// Flattens `x` and appends the bias entry 1.
pub fn augment(x: &Tensor) -> Tensor {
    let mut data = x.data().to_vec();
    data.push(1.0);
    Tensor::vector(data).expect("finite input stays finite")
}

/// Drops the bias entry of an augmented-input gradient and restores `shape`.
pub fn strip_augment(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n = g.numel() - 1;
    Tensor::new(shape.to_vec(), g.data()[..n].to_vec())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given the layer input.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    input.zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 })
}

fn pool_shape(input: &[usize], size: usize, stride: usize) -> Result<Vec<usize>> {
    match *input {
        [c, h, w] if h >= size && w >= size => {
            Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
        }
        _ => Err(Error::dim(format!("max pool {size}x{size} cannot apply to {input:?}"))),
    }
}

/// Max pooling over `[c,h,w]`; returns the output and, per output entry,
/// the flat input index that won. Ties go to the first index in scan order.
pub fn max_pool(x: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let out_shape = pool_shape(x.shape(), size, stride)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (ch * h + oy * stride) * w + ox * stride;
                let mut best = x.data()[best_idx];
                for a in 0..size {
                    for b in 0..size {
                        let idx = (ch * h + oy * stride + a) * w + ox * stride + b;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    let _ = h;
    Ok((Tensor::new(out_shape, out)?, arg))
}

pub fn max_pool_backward(grad: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad.numel() != argmax.len() {
        return Err(Error::dim("pool gradient does not match recorded argmax"));
    }
    let mut out = Tensor::zeros(input_shape);
    for (&g, &idx) in grad.data().iter().zip(argmax) {
        out.data_mut()[idx] += g;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Option<Tensor>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: Option<Tensor>) -> Result<Self> {
        spec.validate()?;
        match (spec.weight_shape(), &weights) {
            (Some(shape), Some(w)) if w.shape() == shape.as_slice() => {}
            (Some(shape), Some(w)) => {
                return Err(Error::dim(format!("{spec:?} needs weights {shape:?}, got {:?}", w.shape())))
            }
            (Some(_), None) => return Err(Error::param(format!("{spec:?} requires weights"))),
            (None, Some(_)) => return Err(Error::param(format!("{spec:?} takes no weights"))),
            (None, None) => {}
        }
        Ok(Layer { spec, weights })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("model has no layers"));
        }
        Ok(Model { layers })
    }

    /// He-uniform initialization, `U(−√(6/fan_in), √(6/fan_in))`, with zero
    /// dense bias. Deterministic in `seed`.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = rng::seeded_stream(seed, 20);
        let layers = specs
            .iter()
            .map(|&spec| {
                spec.validate()?;
                let weights = match spec.weight_shape() {
                    None => None,
                    Some(shape) => {
                        let limit = (6.0 / spec.fan_in() as f64).sqrt();
                        let dense_cols = matches!(spec, LayerSpec::Dense { .. }).then(|| shape[1]);
                        Some(Tensor::from_fn(&shape, |i| match dense_cols {
                            Some(cols) if i % cols == cols - 1 => 0.0,
                            _ => rng.gen_range(-limit..limit),
                        })?)
                    }
                };
                Layer::new(spec, weights)
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Indices of layers that carry weights, in forward order.
    pub fn linear_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].spec.is_linear()).collect()
    }

    pub fn weights(&self, layer: usize) -> Option<&Tensor> {
        self.layers.get(layer).and_then(|l| l.weights.as_ref())
    }

    /// Weights of the linear layers, in forward order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(|l| l.weights.as_ref()).collect()
    }

    /// Walks the layer shapes from `input_shape` and returns the output shape.
    pub fn check_input(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input_shape.to_vec(), |shape, l| l.spec.output_shape(&shape))
    }

    /// `W ← W − η·∇W` on every linear layer; `grads` follows
    /// [`Model::linear_layers`] order.
    pub fn apply_sgd(&mut self, grads: &[Tensor], eta: f64) -> Result<()> {
        let linear = self.linear_layers();
        if grads.len() != linear.len() {
            return Err(Error::dim(format!("{} gradients for {} linear layers", grads.len(), linear.len())));
        }
        for (&l, g) in linear.iter().zip(grads) {
            let w = self.layers[l].weights.as_ref().expect("linear layer has weights");
            w.same_shape(g)?;
        }
        for (&l, g) in linear.iter().zip(grads) {
            let w = self.layers[l].weights.as_mut().expect("linear layer has weights");
            w.add_scaled(-eta, g)?;
        }
        Ok(())
    }
}

/// One SGD update, returning the new model.
pub fn sgd_step(model: &Model, grads: &[Tensor], eta: f64) -> Result<Model> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::param(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    let mut next = model.clone();
    next.apply_sgd(grads, eta)?;
    Ok(next)
}

pub const MANIFEST_FORMAT: &str = "darknight-model/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLayer {
    #[serde(flatten)]
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
}

/// Writes `manifest.toml` plus one DKTENSOR file per linear layer into `dir`.
pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(model.len());
    for (i, layer) in model.layers().iter().enumerate() {
        let weights = match &layer.weights {
            Some(w) => {
                let name = format!("layer{i}.dkt");
                io::write_tensor(w, dir.join(&name), DType::F64)?;
                Some(name)
            }
            None => None,
        };
        layers.push(ManifestLayer { spec: layer.spec, weights });
    }
    let manifest = Manifest { format: MANIFEST_FORMAT.to_string(), layers };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text)?;
    Ok(path)
}

/// Reads a manifest; weight file names resolve relative to its directory.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Model> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unsupported manifest format {:?}", manifest.format)));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let layers = manifest
        .layers
        .into_iter()
        .map(|ml| {
            let weights = ml.weights.map(|name| io::read_tensor(base.join(name))).transpose()?;
            Layer::new(ml.spec, weights)
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(layers)
}
