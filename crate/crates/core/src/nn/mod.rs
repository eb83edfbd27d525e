//! Layers, network architecture and the softmax/cross-entropy head.
//!
//! [`Network`] runs on quantized tensors; [`FloatNetwork`] is the same
//! architecture in plain floating point, used as the full-precision reference
//! and for finite-difference gradient checks.

mod float;
mod quantized;
mod softmax;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fixedpoint::check_bits;

pub use float::{FloatCache, FloatGrads, FloatLayerParams, FloatNetwork};
pub use quantized::{ForwardCache, LayerParams, Network, ParamGrads};
pub use softmax::{
    one_hot, softmax, softmax_xent_backward, softmax_xent_forward, softmax_xent_forward_q, softmax_xent_grad,
    zeroed_fraction,
};

/// Bit widths for the three tensor roles of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Precision {
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub gradient_bits: u32,
}

impl Precision {
    pub const fn uniform(bits: u32) -> Self {
        Precision { weight_bits: bits, activation_bits: bits, gradient_bits: bits }
    }

    fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        check_bits(self.activation_bits)?;
        check_bits(self.gradient_bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Flattens its input and maps it to `outputs` features.
    FullyConnected { outputs: usize },
    /// Square `kernel x kernel` cross-correlation.
    Conv2d { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    /// 2x2 window, stride 2.
    MaxPool,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::FullyConnected { .. } | LayerKind::Conv2d { .. })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::FullyConnected { outputs } => write!(f, "fc({outputs})"),
            LayerKind::Conv2d { out_channels, kernel, stride: 1, pad: 0 } => write!(f, "conv({out_channels},{kernel})"),
            LayerKind::Conv2d { out_channels, kernel, stride, pad } => {
                write!(f, "conv({out_channels},{kernel},{stride},{pad})")
            }
            LayerKind::Relu => f.write_str("relu"),
            LayerKind::MaxPool => f.write_str("pool"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub precision: Precision,
}

/// Parses a whitespace-separated layer list such as
/// `conv(8,5) relu pool conv(16,5) relu pool fc(100) relu fc(10)`.
/// `conv(out,k)` may carry stride and padding as `conv(out,k,stride,pad)`.
pub fn parse_layers(desc: &str, precision: Precision) -> Result<Vec<LayerSpec>> {
    let bad = |tok: &str| Error::Config(format!("bad layer {tok:?}"));
    desc.split_whitespace()
        .map(|tok| {
            let kind = match tok {
                "relu" => LayerKind::Relu,
                "pool" | "maxpool" => LayerKind::MaxPool,
                _ => {
                    let (name, rest) = tok.split_once('(').ok_or_else(|| bad(tok))?;
                    let args = rest.strip_suffix(')').ok_or_else(|| bad(tok))?;
                    let args: Vec<usize> =
                        args.split(',').map(|a| a.trim().parse::<usize>().map_err(|_| bad(tok))).collect::<Result<_>>()?;
                    match (name, args.as_slice()) {
                        ("fc", &[outputs]) => LayerKind::FullyConnected { outputs },
                        ("conv", &[out_channels, kernel]) => LayerKind::Conv2d { out_channels, kernel, stride: 1, pad: 0 },
                        ("conv", &[out_channels, kernel, stride, pad]) => {
                            LayerKind::Conv2d { out_channels, kernel, stride, pad }
                        }
                        _ => return Err(bad(tok)),
                    }
                }
            };
            Ok(LayerSpec { kind, precision })
        })
        .collect()
}

/// A validated layer stack with per-sample shapes worked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the per-sample input shape of layer `i`; the last entry
    /// is the output shape.
    shapes: Vec<Vec<usize>>,
}

impl Architecture {
    /// `input_shape` is per sample: `[features]` or `[channels, height, width]`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            layer.precision.validate()?;
            let cur = shapes.last().unwrap();
            let next = match layer.kind {
                LayerKind::FullyConnected { outputs } => {
                    if outputs == 0 {
                        return Err(Error::Shape(format!("layer {i}: fc with zero outputs")));
                    }
                    vec![outputs]
                }
                LayerKind::Conv2d { out_channels, kernel, stride, pad } => {
                    let &[_, h, w] = cur.as_slice() else {
                        return Err(Error::Shape(format!("layer {i}: conv needs CHW input, got {cur:?}")));
                    };
                    if out_channels == 0 || kernel == 0 || stride == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad {
                        return Err(Error::Shape(format!("layer {i}: {} does not fit input {cur:?}", layer.kind)));
                    }
                    vec![out_channels, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1]
                }
                LayerKind::Relu => cur.clone(),
                LayerKind::MaxPool => {
                    let &[c, h, w] = cur.as_slice() else {
                        return Err(Error::Shape(format!("layer {i}: pool needs CHW input, got {cur:?}")));
                    };
                    if h < 2 || w < 2 {
                        return Err(Error::Shape(format!("layer {i}: pool input {h}x{w} too small")));
                    }
                    vec![c, h / 2, w / 2]
                }
            };
            shapes.push(next);
        }
        match layers.last().map(|l| l.kind) {
            Some(LayerKind::FullyConnected { outputs }) if outputs >= 2 => {}
            _ => return Err(Error::Shape("the last layer must be a classifier fc with at least 2 outputs".into())),
        }
        Ok(Architecture { input_shape, layers, shapes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i + 1]
    }

    pub fn classifier(&self) -> &LayerSpec {
        self.layers.last().unwrap()
    }

    /// Indices of the layers that own parameters.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.has_params()).collect()
    }

    /// Weight and bias shapes of parameterized layer `i`.
    pub fn param_shapes(&self, i: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let input = &self.shapes[i];
        match self.layers[i].kind {
            LayerKind::FullyConnected { outputs } => Some((vec![outputs, input.iter().product()], vec![outputs])),
            LayerKind::Conv2d { out_channels, kernel, .. } => {
                Some((vec![out_channels, input[0], kernel, kernel], vec![out_channels]))
            }
            _ => None,
        }
    }

    /// Text form of the layer list, as accepted by [`parse_layers`].
    pub fn describe(&self) -> String {
        self.layers.iter().map(|l| l.kind.to_string()).collect::<Vec<_>>().join(" ")
    }

    /// Initial weights and biases for every parameterized layer: weights
    /// uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init_params(&self, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.param_layers()
            .into_iter()
            .map(|i| {
                let (w, b) = self.param_shapes(i).unwrap();
                let receptive: usize = w[2..].iter().product();
                let (fan_in, fan_out) = (w[1] * receptive, w[0] * receptive);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..w.iter().product::<usize>()).map(|_| rng.random_range(-limit..limit)).collect();
                (weights, vec![0.0; b[0]])
            })
            .collect()
    }
}
