use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, transpose, ConvGeometry};
use crate::optim::FloatOptimizer;
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

use super::{Architecture, LayerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayerParams<T> {
    pub weight: RealTensor<T>,
    pub bias: RealTensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
enum Entry<T> {
    Linear { input: RealTensor<T> },
    Relu { output: RealTensor<T> },
    Pool { input_shape: Vec<usize>, argmax: Vec<u32> },
}

#[derive(Debug, Clone)]
pub struct FloatCache<T> {
    generation: u64,
    entries: Vec<Entry<T>>,
}

/// The architecture of [`super::Network`] in plain floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatNetwork<T> {
    arch: Architecture,
    params: Vec<FloatLayerParams<T>>,
    generation: u64,
}

fn geometry(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> ConvGeometry {
    ConvGeometry {
        batch: input[0],
        in_channels: input[1],
        height: input[2],
        width: input[3],
        out_channels: weight[0],
        kernel_h: weight[2],
        kernel_w: weight[3],
        stride,
        pad,
    }
}

impl<T: Scalar> FloatNetwork<T> {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let init = arch.init_params(seed);
        FloatNetwork::from_values(arch, &init)
    }

    pub fn from_values(arch: Architecture, values: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let layers = arch.param_layers();
        if values.len() != layers.len() {
            return Err(Error::Shape(format!("{} parameter sets for {} layers", values.len(), layers.len())));
        }
        let params = layers
            .iter()
            .zip(values)
            .map(|(&i, (w, b))| {
                let (ws, bs) = arch.param_shapes(i).unwrap();
                let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
                Ok(FloatLayerParams { weight: RealTensor::new(ws, cast(w))?, bias: RealTensor::new(bs, cast(b))? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FloatNetwork { arch, params, generation: 0 })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[FloatLayerParams<T>] {
        &self.params
    }

    pub fn values(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let widen = |t: &RealTensor<T>| t.values().iter().map(|v| v.to_f64_exact()).collect();
        self.params.iter().map(|p| (widen(&p.weight), widen(&p.bias))).collect()
    }

    /// Mutable flat views of every parameter tensor, in slot order
    /// (weight, bias per layer).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.generation += 1;
        self.params.iter_mut().flat_map(|p| [p.weight.values_mut(), p.bias.values_mut()]).collect()
    }

    pub fn slot_lens(&self) -> Vec<usize> {
        self.params.iter().flat_map(|p| [p.weight.len(), p.bias.len()]).collect()
    }

    pub fn forward(&self, input: &RealTensor<T>) -> Result<(RealTensor<T>, FloatCache<T>)> {
        let per: usize = self.arch.input_shape().iter().product();
        let n = input.shape().first().copied().unwrap_or(0);
        if n == 0 || input.len() != n * per {
            return Err(Error::Shape(format!("input {:?} does not match {:?}", input.shape(), self.arch.input_shape())));
        }
        let mut x = input.clone();
        let mut entries = Vec::with_capacity(self.arch.layers().len());
        let mut param = 0;
        for (i, layer) in self.arch.layers().iter().enumerate() {
            let mut in_shape = vec![n];
            in_shape.extend_from_slice(self.arch.layer_input_shape(i));
            x = match layer.kind {
                LayerKind::FullyConnected { outputs } => {
                    let flat = x.reshape(vec![n, per_sample(&in_shape)])?;
                    let p = &self.params[param];
                    param += 1;
                    let k = flat.shape()[1];
                    let mut out = Vec::with_capacity(n * outputs);
                    for _ in 0..n {
                        out.extend_from_slice(p.bias.values());
                    }
                    gemm_nt(n, k, outputs, flat.values(), p.weight.values(), &mut out);
                    entries.push(Entry::Linear { input: flat });
                    RealTensor::from_parts(vec![n, outputs], out)
                }
                LayerKind::Conv2d { stride, pad, .. } => {
                    let x4 = x.reshape(in_shape.clone())?;
                    let p = &self.params[param];
                    param += 1;
                    let g = geometry(&in_shape, p.weight.shape(), stride, pad);
                    let (o, pix, k) = (g.out_channels, g.out_pixels(), g.patch_len());
                    let sample = per_sample(&in_shape);
                    let mut out = vec![T::zero(); n * o * pix];
                    let mut col = Vec::new();
                    for s in 0..n {
                        let dst = &mut out[s * o * pix..(s + 1) * o * pix];
                        for (c, chunk) in dst.chunks_mut(pix).enumerate() {
                            chunk.iter_mut().for_each(|v| *v = p.bias.values()[c]);
                        }
                        g.im2col(&x4.values()[s * sample..(s + 1) * sample], &mut col);
                        gemm_nn(o, k, pix, p.weight.values(), &col, dst);
                    }
                    entries.push(Entry::Linear { input: x4 });
                    RealTensor::from_parts(vec![n, o, g.out_height(), g.out_width()], out)
                }
                LayerKind::Relu => {
                    let v = x.values().iter().map(|&v| v.max(T::zero())).collect();
                    let y = RealTensor::from_parts(x.shape().to_vec(), v);
                    entries.push(Entry::Relu { output: y.clone() });
                    y
                }
                LayerKind::MaxPool => {
                    let x4 = x.reshape(in_shape.clone())?;
                    let (y, argmax) = max_pool(&x4);
                    entries.push(Entry::Pool { input_shape: in_shape, argmax });
                    y
                }
            };
        }
        Ok((x, FloatCache { generation: self.generation, entries }))
    }

    pub fn backward(&self, cache: &FloatCache<T>, grad_logits: &RealTensor<T>) -> Result<Vec<FloatGrads<T>>> {
        if cache.generation != self.generation || cache.entries.len() != self.arch.layers().len() {
            return Err(Error::Invalid("stale forward cache: parameters changed since the forward pass".into()));
        }
        let mut grads = Vec::with_capacity(self.params.len());
        let mut param = self.params.len();
        let mut g = grad_logits.clone();
        for (i, layer) in self.arch.layers().iter().enumerate().rev() {
            let first = i == 0;
            match (&layer.kind, &cache.entries[i]) {
                (LayerKind::FullyConnected { outputs }, Entry::Linear { input }) => {
                    param -= 1;
                    let w = &self.params[param].weight;
                    let (n, k, o) = (input.shape()[0], input.shape()[1], *outputs);
                    if g.shape() != [n, o] {
                        return Err(Error::Shape(format!("gradient {:?} at layer {i}", g.shape())));
                    }
                    let gt = transpose(n, o, g.values());
                    let mut dw = vec![T::zero(); o * k];
                    gemm_nn(o, n, k, &gt, input.values(), &mut dw);
                    let mut db = vec![T::zero(); o];
                    for row in g.values().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads.push(FloatGrads { weight: dw, bias: db });
                    if !first {
                        let mut dx = vec![T::zero(); n * k];
                        gemm_nn(n, o, k, g.values(), w.values(), &mut dx);
                        g = RealTensor::from_parts(vec![n, k], dx);
                    }
                }
                (LayerKind::Conv2d { stride, pad, .. }, Entry::Linear { input }) => {
                    param -= 1;
                    let w = &self.params[param].weight;
                    let geo = geometry(input.shape(), w.shape(), *stride, *pad);
                    let (n, o, pix, k) = (geo.batch, geo.out_channels, geo.out_pixels(), geo.patch_len());
                    if g.len() != n * o * pix {
                        return Err(Error::Shape(format!("gradient {:?} at layer {i}", g.shape())));
                    }
                    let sample = input.len() / n;
                    let mut dw = vec![T::zero(); o * k];
                    let mut db = vec![T::zero(); o];
                    let mut col = Vec::new();
                    for s in 0..n {
                        let gs = &g.values()[s * o * pix..(s + 1) * o * pix];
                        for (c, chunk) in gs.chunks(pix).enumerate() {
                            db[c] += chunk.iter().copied().sum();
                        }
                        geo.im2col(&input.values()[s * sample..(s + 1) * sample], &mut col);
                        gemm_nt(o, pix, k, gs, &col, &mut dw);
                    }
                    grads.push(FloatGrads { weight: dw, bias: db });
                    if !first {
                        let wt = transpose(o, k, w.values());
                        let mut dx = vec![T::zero(); input.len()];
                        let mut dcol = vec![T::zero(); k * pix];
                        for s in 0..n {
                            dcol.iter_mut().for_each(|v| *v = T::zero());
                            gemm_nn(k, o, pix, &wt, &g.values()[s * o * pix..(s + 1) * o * pix], &mut dcol);
                            geo.col2im(&dcol, &mut dx[s * sample..(s + 1) * sample]);
                        }
                        g = RealTensor::from_parts(input.shape().to_vec(), dx);
                    }
                }
                (LayerKind::Relu, Entry::Relu { output }) => {
                    let v = g.values().iter().zip(output.values()).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect();
                    g = RealTensor::from_parts(output.shape().to_vec(), v);
                }
                (LayerKind::MaxPool, Entry::Pool { input_shape, argmax }) => {
                    let mut dx = vec![T::zero(); input_shape.iter().product()];
                    for (&d, &src) in g.values().iter().zip(argmax) {
                        dx[src as usize] = d;
                    }
                    g = RealTensor::from_parts(input_shape.clone(), dx);
                }
                _ => return Err(Error::Invalid("forward cache does not match the architecture".into())),
            }
        }
        grads.reverse();
        Ok(grads)
    }

    pub fn apply_gradients(&mut self, grads: &[FloatGrads<T>], opt: &mut FloatOptimizer<T>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!("{} gradient sets for {} layers", grads.len(), self.params.len())));
        }
        let gs: Vec<&[T]> = grads.iter().flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()]).collect();
        let ps = self.param_slices_mut();
        opt.step(ps.into_iter().zip(gs).collect())
    }
}

fn per_sample(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn max_pool<T: Scalar>(x: &RealTensor<T>) -> (RealTensor<T>, Vec<u32>) {
    let &[n, c, h, w] = x.shape() else { unreachable!("pool input validated by the architecture") };
    let (oh, ow) = (h / 2, w / 2);
    let v = x.values();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if v[i] > v[best] {
                        best = i;
                    }
                }
                out.push(v[best]);
                argmax.push(best as u32);
            }
        }
    }
    (RealTensor::from_parts(vec![n, c, oh, ow], out), argmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{one_hot, parse_layers, softmax_xent_forward, softmax_xent_grad, Precision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_of(net: &FloatNetwork<f64>, x: &RealTensor<f64>, t: &RealTensor<f64>) -> f64 {
        let (s, _) = net.forward(x).unwrap();
        softmax_xent_forward(&s, t).unwrap().0
    }

    /// Backward against central finite differences of the loss, every parameter.
    fn check_gradients(desc: &str, input: Vec<usize>, batch: usize, seed: u64) -> f64 {
        let arch = Architecture::new(input.clone(), parse_layers(desc, Precision::uniform(8)).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = arch.init_params(seed);
        for (_, b) in values.iter_mut() {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let net = FloatNetwork::<f64>::from_values(arch.clone(), &values).unwrap();
        let mut shape = vec![batch];
        shape.extend(&input);
        let n: usize = shape.iter().product();
        let x = RealTensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..arch.num_classes())).collect();
        let t = one_hot::<f64>(&labels, arch.num_classes()).unwrap();

        let (s, cache) = net.forward(&x).unwrap();
        let (_, y) = softmax_xent_forward(&s, &t).unwrap();
        let grads = net.backward(&cache, &softmax_xent_grad(&y, &t).unwrap()).unwrap();

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for layer in 0..values.len() {
            for which in 0..2 {
                let len = if which == 0 { values[layer].0.len() } else { values[layer].1.len() };
                for j in 0..len {
                    let perturbed = |delta: f64| {
                        let mut v = values.clone();
                        if which == 0 { v[layer].0[j] += delta } else { v[layer].1[j] += delta }
                        loss_of(&FloatNetwork::from_values(arch.clone(), &v).unwrap(), &x, &t)
                    };
                    let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                    let an = if which == 0 { grads[layer].weight[j] } else { grads[layer].bias[j] };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        assert!(check_gradients("fc(12) relu fc(4)", vec![7], 5, 1) <= 1e-4);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        assert!(check_gradients("conv(3,3) relu pool conv(2,2,1,1) fc(3)", vec![2, 6, 6], 2, 2) <= 1e-4);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let arch = Architecture::new(vec![3], parse_layers("fc(2)", Precision::uniform(8)).unwrap()).unwrap();
        let mut net = FloatNetwork::<f32>::new(arch, 0).unwrap();
        let x = RealTensor::new(vec![1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let (s, cache) = net.forward(&x).unwrap();
        let _ = net.param_slices_mut();
        assert!(net.backward(&cache, &s).is_err());
    }
}
