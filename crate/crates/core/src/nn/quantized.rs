use crate::error::{Error, Result};
use crate::optim::{KahanParam, QuantizedOptimizer, StepStats};
use crate::qtensor::{
    conv2d_backward_input_exact, conv2d_backward_kernel_exact, conv2d_exact, matmul_exact, matmul_exact_nt,
    matmul_exact_tn, max_pool_2x2_with_argmax, qt_quantize, qt_relu, quantize_slice, sum_channels_exact, QTensor,
};
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

use super::{Architecture, LayerKind};

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub weight: KahanParam,
    pub bias: KahanParam,
}

/// Gradients for one parameterized layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGrads {
    pub weight: QTensor,
    pub bias: QTensor,
}

#[derive(Debug, Clone)]
enum CacheEntry {
    Linear { input: QTensor },
    Relu { output: QTensor },
    Pool { input_shape: Vec<usize>, argmax: Vec<u32> },
}

/// What [`Network::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    entries: Vec<CacheEntry>,
}

/// Quantized network: every parameter is a [`KahanParam`], every activation
/// and gradient a [`QTensor`] at its layer's bit width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    arch: Architecture,
    params: Vec<LayerParams>,
    generation: u64,
}

impl Network {
    /// Seeded initialization; weights are quantized at each layer's weight bits.
    pub fn new(arch: Architecture, seed: u64, acc_bits: u32) -> Result<Self> {
        let init = arch.init_params(seed);
        Network::from_values(arch, &init, acc_bits)
    }

    /// Builds from real weights and biases (one pair per parameterized layer).
    pub fn from_values(arch: Architecture, values: &[(Vec<f64>, Vec<f64>)], acc_bits: u32) -> Result<Self> {
        let layers = arch.param_layers();
        if values.len() != layers.len() {
            return Err(Error::Shape(format!("{} parameter sets for {} layers", values.len(), layers.len())));
        }
        let params = layers
            .iter()
            .zip(values)
            .map(|(&i, (w, b))| {
                let (ws, bs) = arch.param_shapes(i).unwrap();
                let bits = arch.layers()[i].precision.weight_bits;
                let weight = qt_quantize(&RealTensor::new(ws, w.clone())?, bits)?;
                let bias = qt_quantize(&RealTensor::new(bs, b.clone())?, bits)?;
                Ok(LayerParams { weight: KahanParam::new(weight, acc_bits)?, bias: KahanParam::new(bias, acc_bits)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { arch, params, generation: 0 })
    }

    /// Builds from existing parameters, checking their shapes.
    pub fn from_params(arch: Architecture, params: Vec<LayerParams>) -> Result<Self> {
        let layers = arch.param_layers();
        if params.len() != layers.len() {
            return Err(Error::Shape(format!("{} parameter sets for {} layers", params.len(), layers.len())));
        }
        for (&i, p) in layers.iter().zip(&params) {
            let (ws, bs) = arch.param_shapes(i).unwrap();
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                return Err(Error::Shape(format!("layer {i} parameters do not match {ws:?}/{bs:?}")));
            }
        }
        Ok(Network { arch, params, generation: 0 })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    /// Dequantized `(weight, bias)` values of every parameterized layer.
    pub fn dequantized_params(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.params.iter().map(|p| (p.weight.theta().dequantize_f64(), p.bias.theta().dequantize_f64())).collect()
    }

    /// Quantizes a batch at the first layer's activation bit width.
    pub fn quantize_input<T: Scalar>(&self, input: &RealTensor<T>) -> Result<QTensor> {
        qt_quantize(input, self.arch.layers()[0].precision.activation_bits)
    }

    pub fn forward(&self, input: &QTensor) -> Result<(QTensor, ForwardCache)> {
        let n = batch_of(input, self.arch.input_shape())?;
        let mut x = input.clone();
        let mut entries = Vec::with_capacity(self.arch.layers().len());
        let mut param = 0;
        for (i, layer) in self.arch.layers().iter().enumerate() {
            let bits = layer.precision.activation_bits;
            x = match layer.kind {
                LayerKind::FullyConnected { .. } => {
                    let features = self.arch.layer_input_shape(i).iter().product();
                    let flat = x.reshape(vec![n, features])?;
                    let p = &self.params[param];
                    param += 1;
                    let y = matmul_exact_nt(&flat, p.weight.theta())?.add_channel_bias(p.bias.theta())?.requantize(bits)?;
                    entries.push(CacheEntry::Linear { input: flat });
                    y
                }
                LayerKind::Conv2d { stride, pad, .. } => {
                    let mut shape = vec![n];
                    shape.extend_from_slice(self.arch.layer_input_shape(i));
                    let x4 = x.reshape(shape)?;
                    let p = &self.params[param];
                    param += 1;
                    let y = conv2d_exact(&x4, p.weight.theta(), stride, pad)?
                        .add_channel_bias(p.bias.theta())?
                        .requantize(bits)?;
                    entries.push(CacheEntry::Linear { input: x4 });
                    y
                }
                LayerKind::Relu => {
                    let y = qt_relu(&x);
                    entries.push(CacheEntry::Relu { output: y.clone() });
                    y
                }
                LayerKind::MaxPool => {
                    let (y, argmax) = max_pool_2x2_with_argmax(&x)?;
                    entries.push(CacheEntry::Pool { input_shape: x.shape().to_vec(), argmax });
                    y
                }
            };
        }
        Ok((x, ForwardCache { generation: self.generation, entries }))
    }

    /// Gradients of every parameterized layer, in layer order, given the
    /// quantized gradient of the loss with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &QTensor) -> Result<Vec<ParamGrads>> {
        if cache.generation != self.generation || cache.entries.len() != self.arch.layers().len() {
            return Err(Error::Invalid("stale forward cache: parameters changed since the forward pass".into()));
        }
        let mut grads = Vec::with_capacity(self.params.len());
        let mut param = self.params.len();
        let mut g = grad_logits.clone();
        for (i, layer) in self.arch.layers().iter().enumerate().rev() {
            let bits = layer.precision.gradient_bits;
            let first = i == 0;
            match (&layer.kind, &cache.entries[i]) {
                (LayerKind::FullyConnected { .. }, CacheEntry::Linear { input }) => {
                    param -= 1;
                    let w = self.params[param].weight.theta();
                    if g.shape() != [input.shape()[0], w.shape()[0]] {
                        return Err(Error::Shape(format!("gradient {:?} at layer {i}", g.shape())));
                    }
                    let dw = matmul_exact_tn(&g, input)?.requantize(bits)?;
                    let db = sum_channels_exact(&g)?.requantize(bits)?;
                    grads.push(ParamGrads { weight: dw, bias: db });
                    if !first {
                        g = matmul_exact(&g, w)?.requantize(bits)?;
                    }
                }
                (LayerKind::Conv2d { stride, pad, .. }, CacheEntry::Linear { input }) => {
                    param -= 1;
                    let w = self.params[param].weight.theta();
                    let mut out_shape = vec![input.shape()[0]];
                    out_shape.extend_from_slice(self.arch.layer_output_shape(i));
                    let g4 = g.reshape(out_shape)?;
                    let dw = conv2d_backward_kernel_exact(input, &g4, w.shape(), *stride, *pad)?.requantize(bits)?;
                    let db = sum_channels_exact(&g4)?.requantize(bits)?;
                    grads.push(ParamGrads { weight: dw, bias: db });
                    g = if first {
                        g4
                    } else {
                        conv2d_backward_input_exact(&g4, w, input.shape(), *stride, *pad)?.requantize(bits)?
                    };
                }
                (LayerKind::Relu, CacheEntry::Relu { output }) => {
                    let g2 = g.reshape(output.shape().to_vec())?;
                    let codes = g2.codes().iter().zip(output.codes()).map(|(&d, &y)| if y > 0 { d } else { 0 }).collect();
                    g = QTensor::new(output.shape().to_vec(), codes, g2.format())?;
                }
                (LayerKind::MaxPool, CacheEntry::Pool { input_shape, argmax }) => {
                    let mut codes = vec![0i32; input_shape.iter().product()];
                    if g.len() != argmax.len() {
                        return Err(Error::Shape(format!("gradient {:?} at pool layer {i}", g.shape())));
                    }
                    for (&d, &src) in g.codes().iter().zip(argmax) {
                        codes[src as usize] = d;
                    }
                    g = QTensor::new(input_shape.clone(), codes, g.format())?;
                }
                _ => return Err(Error::Invalid("forward cache does not match the architecture".into())),
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Applies one optimizer update to every parameter.
    pub fn apply_gradients(&mut self, grads: &[ParamGrads], opt: &mut QuantizedOptimizer) -> Result<StepStats> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!("{} gradient sets for {} layers", grads.len(), self.params.len())));
        }
        let mut slots = Vec::with_capacity(2 * grads.len());
        for (p, g) in self.params.iter_mut().zip(grads) {
            slots.push((&mut p.weight, &g.weight));
            slots.push((&mut p.bias, &g.bias));
        }
        let stats = opt.step(slots)?;
        self.generation += 1;
        Ok(stats)
    }

    /// Parameter shapes in optimizer slot order (weight, bias per layer).
    pub fn slot_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().flat_map(|p| [p.weight.shape().to_vec(), p.bias.shape().to_vec()]).collect()
    }

    /// Logits of a real-valued batch, quantizing the input first.
    pub fn predict<T: Scalar>(&self, input: &RealTensor<T>) -> Result<QTensor> {
        Ok(self.forward(&self.quantize_input(input)?)?.0)
    }

    /// Quantized gradient of the batch-mean loss at the classifier's gradient bits.
    pub fn logit_gradient<T: Scalar>(&self, y: &RealTensor<T>, t: &RealTensor<T>) -> Result<QTensor> {
        let g = super::softmax_xent_grad(y, t)?;
        quantize_slice(g.shape().to_vec(), g.values(), self.arch.classifier().precision.gradient_bits)
    }
}

fn batch_of(input: &QTensor, sample_shape: &[usize]) -> Result<usize> {
    let per: usize = sample_shape.iter().product();
    let n = input.shape().first().copied().unwrap_or(0);
    if n == 0 || input.shape()[1..].iter().product::<usize>() != per {
        return Err(Error::Shape(format!("input {:?} does not match sample shape {sample_shape:?}", input.shape())));
    }
    Ok(n)
}
