//! Quantized tensors and their integer linear algebra.
//!
//! Products are accumulated exactly in 64-bit integers ([`ExactTensor`]) and
//! requantized once, at the output of each op, onto a freshly chosen dynamic
//! exponent. The only error an op introduces is that final rounding.

use crate::error::{Error, Result};
use crate::fixedpoint::{
    check_bits, exponent_for_max_int, shr_round_half_even, FixedPointFormat, ZERO_TENSOR_EXPONENT,
};
use crate::kernels::{gemm_nn, gemm_nt, transpose, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{numel, RealTensor};

/// Shaped array of integer codes sharing one [`FixedPointFormat`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    format: FixedPointFormat,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i32>, format: FixedPointFormat) -> Result<Self> {
        if numel(&shape) != codes.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} codes, got {}",
                numel(&shape),
                codes.len()
            )));
        }
        if let Some(&c) = codes.iter().find(|&&c| !format.contains_code(c as i64)) {
            return Err(Error::CodeRange { code: c as i64, bits: format.bit_width() });
        }
        Ok(QTensor { shape, codes, format })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, codes: Vec<i32>, format: FixedPointFormat) -> Self {
        debug_assert_eq!(numel(&shape), codes.len());
        QTensor { shape, codes, format }
    }

    /// In-place rewrite of the codes under a new format. The caller keeps
    /// every code inside `format`'s range.
    pub(crate) fn rewrite(&mut self, format: FixedPointFormat, mut code: impl FnMut(usize, i32) -> i32) {
        for (i, c) in self.codes.iter_mut().enumerate() {
            *c = code(i, *c);
        }
        self.format = format;
    }

    /// All-zero tensor at the zero-tensor exponent.
    pub fn zeros(shape: Vec<usize>, bit_width: u32) -> Result<Self> {
        let format = FixedPointFormat::new(bit_width, ZERO_TENSOR_EXPONENT)?;
        let n = numel(&shape);
        Ok(QTensor { shape, codes: vec![0; n], format })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.format.step()
    }

    pub fn value(&self, index: usize) -> f64 {
        self.format.value_of(self.codes[index] as i64)
    }

    pub fn dequantize<T: Scalar>(&self) -> RealTensor<T> {
        let values = self.codes.iter().map(|&c| T::from_f64_lossy(self.format.value_of(c as i64))).collect();
        RealTensor::from_parts(self.shape.clone(), values)
    }

    pub fn dequantize_f64(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.format.value_of(c as i64)).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.codes.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(QTensor { shape, ..self })
    }

    pub fn to_exact(&self) -> ExactTensor {
        ExactTensor {
            shape: self.shape.clone(),
            acc: self.codes.iter().map(|&c| c as i64).collect(),
            exponent: self.format.exponent(),
        }
    }

    /// Requantize to `bit_width` with a freshly chosen exponent.
    pub fn requantize(&self, bit_width: u32) -> Result<QTensor> {
        self.to_exact().requantize(bit_width)
    }

    pub fn max_abs_code(&self) -> i64 {
        self.codes.iter().map(|&c| (c as i64).abs()).max().unwrap_or(0)
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> QTensor {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        QTensor::from_parts(shape, self.codes[start * row..(start + count) * row].to_vec(), self.format)
    }
}

/// Quantize a real tensor with a per-tensor dynamic exponent.
pub fn qt_quantize<T: Scalar>(t: &RealTensor<T>, bit_width: u32) -> Result<QTensor> {
    quantize_slice(t.shape().to_vec(), t.values(), bit_width)
}

pub(crate) fn quantize_slice<T: Scalar>(shape: Vec<usize>, values: &[T], bit_width: u32) -> Result<QTensor> {
    check_bits(bit_width)?;
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let e = crate::fixedpoint::choose_exponent(values, bit_width)?;
    let format = FixedPointFormat::new(bit_width, e)?;
    let codes = values.iter().map(|v| format.code_of(v.to_f64_exact()) as i32).collect();
    Ok(QTensor::from_parts(shape, codes, format))
}

/// Quantize f64 values onto an explicit format (no exponent search).
pub fn quantize_with_format(shape: Vec<usize>, values: &[f64], format: FixedPointFormat) -> Result<QTensor> {
    if numel(&shape) != values.len() {
        return Err(Error::Shape(format!("shape {shape:?} vs {} values", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let codes = values.iter().map(|&v| format.code_of(v) as i32).collect();
    Ok(QTensor::from_parts(shape, codes, format))
}

/// Exact pre-requantization result: `acc[i] * 2^exponent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactTensor {
    shape: Vec<usize>,
    acc: Vec<i64>,
    exponent: i32,
}

impl ExactTensor {
    pub fn new(shape: Vec<usize>, acc: Vec<i64>, exponent: i32) -> Result<Self> {
        if numel(&shape) != acc.len() {
            return Err(Error::Shape(format!("shape {shape:?} vs {} accumulators", acc.len())));
        }
        Ok(ExactTensor { shape, acc, exponent })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn acc(&self) -> &[i64] {
        &self.acc
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.acc.iter().map(|&a| crate::fixedpoint::scale_pow2(a as f64, self.exponent)).collect()
    }

    /// Round onto a `bit_width` grid whose exponent is the smallest that
    /// holds every element.
    pub fn requantize(&self, bit_width: u32) -> Result<QTensor> {
        check_bits(bit_width)?;
        let max_abs = self.acc.iter().map(|a| a.unsigned_abs()).max().unwrap_or(0);
        let e_out = exponent_for_max_int(max_abs, self.exponent, bit_width, ZERO_TENSOR_EXPONENT);
        let format = FixedPointFormat::new(bit_width, e_out)?;
        let shift = e_out - self.exponent;
        let codes = if max_abs == 0 {
            vec![0; self.acc.len()]
        } else if shift >= 0 {
            self.acc.iter().map(|&a| shr_round_half_even(a as i128, shift as u32) as i32).collect()
        } else {
            // Finer grid: exact, and in range by choice of exponent.
            self.acc.iter().map(|&a| (a << (-shift) as u32) as i32).collect()
        };
        Ok(QTensor::from_parts(self.shape.clone(), codes, format))
    }

    /// Elementwise sum with exponent alignment. Exact unless the operands'
    /// exponents are more than 61 apart or the sum needs more than 62 bits;
    /// then the sum is rounded to odd on a coarser grid, which keeps a later
    /// [`ExactTensor::requantize`] correctly rounded.
    pub fn add(&self, other: &ExactTensor) -> Result<ExactTensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("add {:?} vs {:?}", self.shape, other.shape)));
        }
        let (acc, exponent) = add_aligned(&self.acc, self.exponent, |i| other.acc[i], other.exponent);
        Ok(ExactTensor { shape: self.shape.clone(), acc, exponent })
    }

    /// `self + bias` broadcast along axis 1 (`[N, C, ...] + [C]`), with the
    /// same exactness as [`ExactTensor::add`].
    pub fn add_channel_bias(&self, bias: &QTensor) -> Result<ExactTensor> {
        if self.shape.len() < 2 || bias.shape() != [self.shape[1]] {
            return Err(Error::Shape(format!("bias {:?} for activations {:?}", bias.shape(), self.shape)));
        }
        let channels = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let codes = bias.codes();
        let (acc, exponent) =
            add_aligned(&self.acc, self.exponent, |i| codes[(i / inner) % channels] as i64, bias.format().exponent());
        Ok(ExactTensor { shape: self.shape.clone(), acc, exponent })
    }
}

/// Round-to-odd of `v / 2^shift`: truncate toward minus infinity, then set
/// the lowest bit if anything nonzero was dropped.
fn shr_round_to_odd(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    if shift >= 127 {
        return v.signum();
    }
    let q = v >> shift;
    if v - (q << shift) != 0 {
        q | 1
    } else {
        q
    }
}

/// `a[i] * 2^ea + b(i) * 2^eb` on a common grid that fits i64.
fn add_aligned(a: &[i64], ea: i32, b: impl Fn(usize) -> i64, eb: i32) -> (Vec<i64>, i32) {
    let e = ea.min(eb).max(ea.max(eb) - 61);
    let align = |x: i64, ex: i32| {
        if ex >= e {
            (x as i128) << (ex - e) as u32
        } else {
            // Only the finer operand lands here, and then the coarser one was
            // shifted left by 61, so it is even and the sum is rounded to odd.
            shr_round_to_odd(x as i128, (e - ex) as u32)
        }
    };
    let wide: Vec<i128> = a.iter().enumerate().map(|(i, &x)| align(x, ea) + align(b(i), eb)).collect();
    let max = wide.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let mut shift = 0u32;
    while (max >> shift) >= 1u128 << 62 {
        shift += 1;
    }
    let acc = wide.into_iter().map(|v| shr_round_to_odd(v, shift) as i64).collect();
    (acc, e + shift as i32)
}

/// Errors out if `terms` products of the two maxima could overflow i64.
fn check_accumulator(max_a: i64, max_b: i64, terms: usize, op: &'static str) -> Result<()> {
    let bound = (max_a as u128) * (max_b as u128) * (terms.max(1) as u128);
    if bound > i64::MAX as u128 {
        Err(Error::AccumulatorOverflow(op))
    } else {
        Ok(())
    }
}

fn dims2(t: &QTensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// Exact `a * b` for 2-D tensors.
pub fn matmul_exact(a: &QTensor, b: &QTensor) -> Result<ExactTensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    check_accumulator(a.max_abs_code(), b.max_abs_code(), k, "matmul")?;
    let mut acc = vec![0i64; m * n];
    gemm_nn(m, k, n, a.codes(), b.codes(), &mut acc);
    Ok(ExactTensor { shape: vec![m, n], acc, exponent: a.format().exponent() + b.format().exponent() })
}

/// Exact `a * b^T`.
pub fn matmul_exact_nt(a: &QTensor, b: &QTensor) -> Result<ExactTensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (n, k2) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    check_accumulator(a.max_abs_code(), b.max_abs_code(), k, "matmul")?;
    let bt = transpose(n, k, b.codes());
    let mut acc = vec![0i64; m * n];
    gemm_nn(m, k, n, a.codes(), &bt, &mut acc);
    Ok(ExactTensor { shape: vec![m, n], acc, exponent: a.format().exponent() + b.format().exponent() })
}

/// Exact `a^T * b`.
pub fn matmul_exact_tn(a: &QTensor, b: &QTensor) -> Result<ExactTensor> {
    let (k, m) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    check_accumulator(a.max_abs_code(), b.max_abs_code(), k, "matmul")?;
    let at = transpose(k, m, a.codes());
    let mut acc = vec![0i64; m * n];
    gemm_nn(m, k, n, &at, b.codes(), &mut acc);
    Ok(ExactTensor { shape: vec![m, n], acc, exponent: a.format().exponent() + b.format().exponent() })
}

pub fn qt_matmul(a: &QTensor, b: &QTensor, out_bits: u32) -> Result<QTensor> {
    matmul_exact(a, b)?.requantize(out_bits)
}

fn conv_geometry(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<ConvGeometry> {
    let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
        return Err(Error::Shape(format!("conv expects NCHW input and OIHW kernel, got {input:?} / {kernel:?}")));
    };
    if c != kc {
        return Err(Error::Shape(format!("conv input has {c} channels, kernel expects {kc}")));
    }
    let g = ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: w,
        out_channels: o,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad,
    };
    g.validate().map_err(Error::Shape)?;
    Ok(g)
}

/// Exact 2-D cross-correlation, NCHW input with OIHW kernel.
pub fn conv2d_exact(input: &QTensor, kernel: &QTensor, stride: usize, pad: usize) -> Result<ExactTensor> {
    let g = conv_geometry(input.shape(), kernel.shape(), stride, pad)?;
    check_accumulator(input.max_abs_code(), kernel.max_abs_code(), g.patch_len(), "conv2d")?;
    let (p, o) = (g.out_pixels(), g.out_channels);
    let sample_len = g.in_channels * g.in_pixels();
    let mut acc = vec![0i64; g.batch * o * p];
    let mut col = Vec::new();
    for n in 0..g.batch {
        g.im2col(&input.codes()[n * sample_len..(n + 1) * sample_len], &mut col);
        gemm_nn(o, g.patch_len(), p, kernel.codes(), &col, &mut acc[n * o * p..(n + 1) * o * p]);
    }
    Ok(ExactTensor {
        shape: vec![g.batch, o, g.out_height(), g.out_width()],
        acc,
        exponent: input.format().exponent() + kernel.format().exponent(),
    })
}

pub fn qt_conv2d(input: &QTensor, kernel: &QTensor, stride: usize, pad: usize, out_bits: u32) -> Result<QTensor> {
    conv2d_exact(input, kernel, stride, pad)?.requantize(out_bits)
}

/// Exact gradient of a conv with respect to its input (a transposed conv).
pub fn conv2d_backward_input_exact(
    grad_out: &QTensor,
    kernel: &QTensor,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ExactTensor> {
    let g = conv_geometry(input_shape, kernel.shape(), stride, pad)?;
    let expect = [g.batch, g.out_channels, g.out_height(), g.out_width()];
    if grad_out.shape() != expect {
        return Err(Error::Shape(format!("conv grad {:?}, expected {expect:?}", grad_out.shape())));
    }
    let terms = g.out_channels * g.kernel_h * g.kernel_w;
    check_accumulator(grad_out.max_abs_code(), kernel.max_abs_code(), terms, "conv2d backward")?;
    let (p, o, k) = (g.out_pixels(), g.out_channels, g.patch_len());
    let sample_len = g.in_channels * g.in_pixels();
    let kt = transpose(o, k, kernel.codes());
    let mut acc = vec![0i64; g.batch * sample_len];
    let mut dcol = vec![0i64; k * p];
    for n in 0..g.batch {
        dcol.iter_mut().for_each(|v| *v = 0);
        gemm_nn(k, o, p, &kt, &grad_out.codes()[n * o * p..(n + 1) * o * p], &mut dcol);
        g.col2im(&dcol, &mut acc[n * sample_len..(n + 1) * sample_len]);
    }
    Ok(ExactTensor {
        shape: input_shape.to_vec(),
        acc,
        exponent: grad_out.format().exponent() + kernel.format().exponent(),
    })
}

/// Exact gradient of a conv with respect to its kernel, summed over the batch.
pub fn conv2d_backward_kernel_exact(
    input: &QTensor,
    grad_out: &QTensor,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ExactTensor> {
    let g = conv_geometry(input.shape(), kernel_shape, stride, pad)?;
    let expect = [g.batch, g.out_channels, g.out_height(), g.out_width()];
    if grad_out.shape() != expect {
        return Err(Error::Shape(format!("conv grad {:?}, expected {expect:?}", grad_out.shape())));
    }
    let (p, o, k) = (g.out_pixels(), g.out_channels, g.patch_len());
    check_accumulator(input.max_abs_code(), grad_out.max_abs_code(), g.batch * p, "conv2d backward")?;
    let sample_len = g.in_channels * g.in_pixels();
    let mut acc = vec![0i64; o * k];
    let mut col = Vec::new();
    for n in 0..g.batch {
        g.im2col(&input.codes()[n * sample_len..(n + 1) * sample_len], &mut col);
        gemm_nt(o, p, k, &grad_out.codes()[n * o * p..(n + 1) * o * p], &col, &mut acc);
    }
    Ok(ExactTensor {
        shape: kernel_shape.to_vec(),
        acc,
        exponent: input.format().exponent() + grad_out.format().exponent(),
    })
}

/// Exact per-channel sum over every axis except axis 1.
pub fn sum_channels_exact(t: &QTensor) -> Result<ExactTensor> {
    if t.shape().len() < 2 {
        return Err(Error::Shape(format!("channel sum needs rank >= 2, got {:?}", t.shape())));
    }
    let channels = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    check_accumulator(t.max_abs_code(), 1, t.len() / channels.max(1), "channel sum")?;
    let mut acc = vec![0i64; channels];
    for (i, &c) in t.codes().iter().enumerate() {
        acc[(i / inner) % channels] += c as i64;
    }
    Ok(ExactTensor { shape: vec![channels], acc, exponent: t.format().exponent() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Relu,
    MaxPool2x2,
}

/// Dispatch for the elementwise family. `Add`/`Sub` take two operands and
/// requantize to `out_bits`; `Relu`/`MaxPool2x2` take one and keep its format.
pub fn qt_elementwise(op: ElementwiseOp, args: &[&QTensor], out_bits: u32) -> Result<QTensor> {
    match (op, args) {
        (ElementwiseOp::Add, [a, b]) => qt_add(a, b, out_bits),
        (ElementwiseOp::Sub, [a, b]) => qt_sub(a, b, out_bits),
        (ElementwiseOp::Relu, [a]) => Ok(qt_relu(a)),
        (ElementwiseOp::MaxPool2x2, [a]) => qt_max_pool_2x2(a),
        _ => Err(Error::Invalid(format!("{op:?} called with {} operands", args.len()))),
    }
}

pub fn qt_add(a: &QTensor, b: &QTensor, out_bits: u32) -> Result<QTensor> {
    a.to_exact().add(&b.to_exact())?.requantize(out_bits)
}

pub fn qt_sub(a: &QTensor, b: &QTensor, out_bits: u32) -> Result<QTensor> {
    let neg = ExactTensor {
        shape: b.shape().to_vec(),
        acc: b.codes().iter().map(|&c| -(c as i64)).collect(),
        exponent: b.format().exponent(),
    };
    a.to_exact().add(&neg)?.requantize(out_bits)
}

pub fn qt_relu(a: &QTensor) -> QTensor {
    QTensor::from_parts(a.shape().to_vec(), a.codes().iter().map(|&c| c.max(0)).collect(), a.format())
}

pub fn qt_max_pool_2x2(a: &QTensor) -> Result<QTensor> {
    Ok(max_pool_2x2_with_argmax(a)?.0)
}

/// 2x2/stride-2 max pool over NCHW, returning the flat input index chosen
/// for every output element (first maximum wins).
pub fn max_pool_2x2_with_argmax(a: &QTensor) -> Result<(QTensor, Vec<u32>)> {
    let &[n, c, h, w] = a.shape() else {
        return Err(Error::Shape(format!("max pool expects NCHW, got {:?}", a.shape())));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("max pool input {h}x{w} too small")));
    }
    let mut codes = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if a.codes()[i] > a.codes()[best] {
                        best = i;
                    }
                }
                codes.push(a.codes()[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((QTensor::from_parts(vec![n, c, oh, ow], codes, a.format()), argmax))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{Signed, Zero};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmt(bits: u32, e: i32) -> FixedPointFormat {
        FixedPointFormat::new(bits, e).unwrap()
    }

    fn qt(shape: &[usize], codes: &[i32], bits: u32, e: i32) -> QTensor {
        QTensor::new(shape.to_vec(), codes.to_vec(), fmt(bits, e)).unwrap()
    }

    fn random_qt(rng: &mut ChaCha8Rng, shape: &[usize], bits: u32, e: i32) -> QTensor {
        let f = fmt(bits, e);
        let codes = (0..numel(shape)).map(|_| rng.random_range(f.min_code()..=f.max_code()) as i32).collect();
        QTensor::new(shape.to_vec(), codes, f).unwrap()
    }

    /// Naive real-valued matmul over dequantized inputs.
    fn reference_matmul(a: &QTensor, b: &QTensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let (av, bv) = (a.dequantize_f64(), b.dequantize_f64());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|l| av[i * k + l] * bv[l * n + j]).sum();
            }
        }
        out
    }

    /// Naive real-valued cross-correlation over dequantized inputs.
    fn reference_conv(x: &QTensor, w: &QTensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let (xv, wv) = (x.dequantize_f64(), w.dequantize_f64());
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += xv[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * wv[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        (vec![n, o, oh, ow], out)
    }

    fn assert_within_half_step(q: &QTensor, reference: &[f64]) {
        let got = q.dequantize_f64();
        for (g, r) in got.iter().zip(reference) {
            assert!((g - r).abs() <= q.step() / 2.0, "{g} vs {r}, step {}", q.step());
        }
    }

    #[test]
    fn quantize_tensor_examples() {
        let z = qt_quantize(&RealTensor::<f64>::zeros(vec![2, 3]), 8).unwrap();
        assert!(z.codes().iter().all(|&c| c == 0));
        assert_eq!(z.format().exponent(), ZERO_TENSOR_EXPONENT);

        let t = RealTensor::new(vec![3], vec![-1.0f64, 0.5, 1.0]).unwrap();
        let q = qt_quantize(&t, 8).unwrap();
        assert_eq!(q.format().exponent(), -6);
        assert_eq!(q.codes(), &[-64, 32, 64]);

        let t = RealTensor::new(vec![1], vec![0.296875f64]).unwrap();
        let q = qt_quantize(&t, 8).unwrap();
        // 0.296875 = 38/128 = 76/256; 127 * 2^-9 < 0.296875 <= 127 * 2^-8
        assert_eq!(q.format().exponent(), -8);
        assert_eq!(q.codes(), &[76]);
        assert_eq!(q.dequantize::<f64>().values(), &[0.296875]);
    }

    #[test]
    fn qtensor_rejects_bad_codes() {
        assert!(QTensor::new(vec![2], vec![0, 128], fmt(8, 0)).is_err());
        assert!(QTensor::new(vec![3], vec![0, 1], fmt(8, 0)).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_qt(&mut rng, &[3, 4], 8, -5);
        let eye = qt(&[3, 3], &[1, 0, 0, 0, 1, 0, 0, 0, 1], 8, 0);
        let out = qt_matmul(&eye, &b, 8).unwrap();
        assert_eq!(out, b.requantize(8).unwrap());

        let a = qt(&[1, 1], &[3], 8, -2);
        let b = qt(&[1, 1], &[5], 8, -3);
        let exact = matmul_exact(&a, &b).unwrap();
        assert_eq!((exact.acc(), exact.exponent()), (&[15i64][..], -5));
        assert_eq!(exact.to_f64(), vec![0.46875]);
        let q = exact.requantize(8).unwrap();
        assert_eq!(q.dequantize_f64(), vec![0.46875]);
    }

    #[test]
    fn matmul_shape_errors() {
        let a = qt(&[2, 3], &[0; 6], 8, 0);
        assert!(matches!(qt_matmul(&a, &a, 8), Err(Error::Shape(_))));
        let big = qt(&[1, 4], &[i32::MAX; 4], 32, 0);
        let big_t = qt(&[4, 1], &[i32::MAX; 4], 32, 0);
        assert!(matches!(matmul_exact(&big, &big_t), Err(Error::AccumulatorOverflow(_))));
    }

    #[test]
    fn matmul_vs_real_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_qt(&mut rng, &[4, 4], 8, -6);
            let b = random_qt(&mut rng, &[4, 4], 8, -3);
            let q = qt_matmul(&a, &b, 8).unwrap();
            assert_within_half_step(&q, &reference_matmul(&a, &b));
        }
    }

    #[test]
    fn transposed_matmuls_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_qt(&mut rng, &[3, 5], 8, -2);
        let b = random_qt(&mut rng, &[4, 5], 8, -4);
        let bt = QTensor::from_parts(vec![5, 4], transpose(4, 5, b.codes()), b.format());
        assert_eq!(matmul_exact_nt(&a, &b).unwrap(), matmul_exact(&a, &bt).unwrap());
        let at = QTensor::from_parts(vec![5, 3], transpose(3, 5, a.codes()), a.format());
        assert_eq!(matmul_exact_tn(&at, &bt).unwrap(), matmul_exact(&a, &bt).unwrap());
    }

    #[test]
    fn conv_examples() {
        let x = qt(&[1, 1, 3, 3], &[1, -2, 3, 4, 5, -6, 7, 8, 9], 8, -3);
        let one = qt(&[1, 1, 1, 1], &[1], 8, 0);
        assert_eq!(qt_conv2d(&x, &one, 1, 0, 8).unwrap(), x.requantize(8).unwrap());

        let x = qt(&[1, 1, 3, 3], &[1; 9], 8, -2);
        let k = qt(&[1, 1, 2, 2], &[1; 4], 8, -3);
        let exact = conv2d_exact(&x, &k, 1, 0).unwrap();
        assert_eq!(exact.shape(), &[1, 1, 2, 2]);
        assert_eq!(exact.acc(), &[4, 4, 4, 4]);
        assert_eq!(exact.exponent(), -5);
    }

    #[test]
    fn conv_vs_real_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
            let x = random_qt(&mut rng, &[2, 3, 6, 5], 8, -4);
            let w = random_qt(&mut rng, &[4, 3, 3, 2], 8, -7);
            let q = qt_conv2d(&x, &w, stride, pad, 8).unwrap();
            let (shape, r) = reference_conv(&x, &w, stride, pad);
            assert_eq!(q.shape(), &shape[..]);
            assert_within_half_step(&q, &r);
        }
    }

    #[test]
    fn conv_geometry_errors() {
        let x = qt(&[1, 2, 3, 3], &[0; 18], 8, 0);
        let k = qt(&[1, 1, 2, 2], &[0; 4], 8, 0);
        assert!(matches!(qt_conv2d(&x, &k, 1, 0, 8), Err(Error::Shape(_))));
        let k = qt(&[1, 2, 4, 4], &[0; 32], 8, 0);
        assert!(matches!(qt_conv2d(&x, &k, 1, 0, 8), Err(Error::Shape(_))));
    }

    /// The transposed-conv and kernel-gradient kernels are adjoints of the
    /// forward conv: <conv(x, w), g> = <x, dx(g, w)> = <w, dw(x, g)>.
    #[test]
    fn conv_backward_adjoint_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, pad) in [(1, 0), (2, 1), (1, 2)] {
            let x = random_qt(&mut rng, &[2, 2, 5, 6], 8, 0);
            let w = random_qt(&mut rng, &[3, 2, 3, 3], 8, 0);
            let y = conv2d_exact(&x, &w, stride, pad).unwrap();
            let g = random_qt(&mut rng, y.shape(), 8, 0);
            let lhs: i64 = y.acc().iter().zip(g.codes()).map(|(&a, &b)| a * b as i64).sum();
            let dx = conv2d_backward_input_exact(&g, &w, x.shape(), stride, pad).unwrap();
            let mid: i64 = dx.acc().iter().zip(x.codes()).map(|(&a, &b)| a * b as i64).sum();
            let dw = conv2d_backward_kernel_exact(&x, &g, w.shape(), stride, pad).unwrap();
            let rhs: i64 = dw.acc().iter().zip(w.codes()).map(|(&a, &b)| a * b as i64).sum();
            assert_eq!(lhs, mid);
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn elementwise_examples() {
        let neg = qt(&[4], &[-1, -5, -128, -3], 8, -2);
        assert!(qt_relu(&neg).codes().iter().all(|&c| c == 0));
        assert_eq!(qt_relu(&neg).format(), neg.format());

        let p = qt(&[1, 1, 2, 2], &[1, 2, 3, 4], 8, 0);
        let pooled = qt_elementwise(ElementwiseOp::MaxPool2x2, &[&p], 8).unwrap();
        assert_eq!(pooled.codes(), &[4]);

        // 3 * 2^-2 + 1 * 2^-1 = 1.25
        let a = qt(&[1], &[3], 8, -2);
        let b = qt(&[1], &[1], 8, -1);
        let s = qt_elementwise(ElementwiseOp::Add, &[&a, &b], 8).unwrap();
        assert_eq!(s.dequantize_f64(), vec![1.25]);
        let d = qt_sub(&a, &b, 8).unwrap();
        assert_eq!(d.dequantize_f64(), vec![0.25]);
        assert!(qt_add(&a, &qt(&[2], &[1, 1], 8, 0), 8).is_err());
        assert!(qt_elementwise(ElementwiseOp::Relu, &[&a, &b], 8).is_err());
    }

    #[test]
    fn bias_and_channel_sum() {
        let x = ExactTensor::new(vec![2, 2, 1, 2], vec![1, 2, 3, 4, 5, 6, 7, 8], -4).unwrap();
        let bias = qt(&[2], &[1, -1], 8, -2);
        let y = x.add_channel_bias(&bias).unwrap();
        assert_eq!(y.exponent(), -4);
        assert_eq!(y.acc(), &[5, 6, -1, 0, 9, 10, 3, 4]);

        let g = qt(&[2, 2, 1, 2], &[1, 2, 3, 4, 5, 6, 7, 8], 8, -3);
        let s = sum_channels_exact(&g).unwrap();
        assert_eq!(s.acc(), &[1 + 2 + 5 + 6, 3 + 4 + 7 + 8]);
    }

    proptest! {
        #[test]
        fn add_within_half_step(a in prop::collection::vec(-128i32..=127, 6), b in prop::collection::vec(-128i32..=127, 6),
                                ea in -10i32..10, eb in -10i32..10, bits in 2u32..=16) {
            let x = qt(&[6], &a, 8, ea);
            let y = qt(&[6], &b, 8, eb);
            let s = qt_add(&x, &y, bits).unwrap();
            let reference: Vec<f64> = x.dequantize_f64().iter().zip(y.dequantize_f64()).map(|(p, q)| p + q).collect();
            let got = s.dequantize_f64();
            for (g, r) in got.iter().zip(&reference) {
                prop_assert!((g - r).abs() <= s.step() / 2.0);
            }
        }

        /// Exact accumulation is linear in the codes: (a1 + a2) b = a1 b + a2 b.
        #[test]
        fn matmul_exact_is_linear(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a1 = random_qt(&mut rng, &[3, 4], 8, -2);
            let a2 = random_qt(&mut rng, &[3, 4], 8, -2);
            let b = random_qt(&mut rng, &[4, 2], 8, 1);
            let sum_codes: Vec<i32> = a1.codes().iter().zip(a2.codes()).map(|(x, y)| x + y).collect();
            let a12 = QTensor::from_parts(vec![3, 4], sum_codes, fmt(16, -2));
            let lhs = matmul_exact(&a12, &b).unwrap();
            let r1 = matmul_exact(&a1, &b).unwrap();
            let r2 = matmul_exact(&a2, &b).unwrap();
            let rhs: Vec<i64> = r1.acc().iter().zip(r2.acc()).map(|(x, y)| x + y).collect();
            prop_assert_eq!(lhs.acc(), &rhs[..]);

            let x = random_qt(&mut rng, &[1, 2, 4, 4], 8, 0);
            let x2 = random_qt(&mut rng, &[1, 2, 4, 4], 8, 0);
            let w = random_qt(&mut rng, &[2, 2, 3, 3], 8, 0);
            let xs: Vec<i32> = x.codes().iter().zip(x2.codes()).map(|(p, q)| p + q).collect();
            let xsum = QTensor::from_parts(vec![1, 2, 4, 4], xs, fmt(16, 0));
            let c = conv2d_exact(&xsum, &w, 1, 1).unwrap();
            let c1 = conv2d_exact(&x, &w, 1, 1).unwrap();
            let c2 = conv2d_exact(&x2, &w, 1, 1).unwrap();
            let sum: Vec<i64> = c1.acc().iter().zip(c2.acc()).map(|(p, q)| p + q).collect();
            prop_assert_eq!(c.acc(), &sum[..]);
        }

        #[test]
        fn monotone_ops_commute_with_dequantization(codes in prop::collection::vec(-128i32..=127, 16), e in -8i32..4) {
            let t = qt(&[1, 1, 4, 4], &codes, 8, e);
            let relu_then = qt_relu(&t).dequantize_f64();
            let then_relu: Vec<f64> = t.dequantize_f64().iter().map(|v| v.max(0.0)).collect();
            prop_assert_eq!(relu_then, then_relu);

            let pooled = qt_max_pool_2x2(&t).unwrap().dequantize_f64();
            let v = t.dequantize_f64();
            for (i, p) in pooled.iter().enumerate() {
                let (y, x) = (i / 2, i % 2);
                let m = [v[2 * y * 4 + 2 * x], v[2 * y * 4 + 2 * x + 1], v[(2 * y + 1) * 4 + 2 * x], v[(2 * y + 1) * 4 + 2 * x + 1]]
                    .into_iter().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(*p, m);
            }
        }

        #[test]
        fn requantize_matches_quantizing_exact_values(acc in prop::collection::vec(-(1i64 << 40)..(1i64 << 40), 1..8), e in -30i32..10, bits in 2u32..=24) {
            let exact = ExactTensor::new(vec![acc.len()], acc.clone(), e).unwrap();
            let via_int = exact.requantize(bits).unwrap();
            let reals = RealTensor::new(vec![acc.len()], exact.to_f64()).unwrap();
            let via_float = qt_quantize(&reals, bits).unwrap();
            prop_assert_eq!(via_int, via_float);
        }

        /// Adding far-apart or very wide operands and requantizing gives the
        /// correctly rounded result of the exact rational sum.
        #[test]
        fn wide_add_then_requantize_is_correctly_rounded(
            a in prop::collection::vec(-(1i64 << 62)..(1i64 << 62), 3),
            b in prop::collection::vec(any::<i32>(), 3),
            ea in -40i32..40,
            gap in -150i32..150,
            bits in 2u32..=32,
        ) {
            let x = ExactTensor::new(vec![3], a.clone(), ea).unwrap();
            let y = ExactTensor::new(vec![3], b.iter().map(|&v| v as i64).collect(), ea + gap).unwrap();
            let got = x.add(&y).unwrap().requantize(bits).unwrap();
            let exact: Vec<BigRational> =
                a.iter().zip(&b).map(|(&p, &q)| big(p as i128) * pow2r(ea) + big(q as i128) * pow2r(ea + gap)).collect();
            let max = exact.iter().map(|v| v.abs()).max().unwrap();
            let top = big(fmt(bits, 0).max_code() as i128);
            let mut e = -300i32;
            if max.is_zero() {
                e = ZERO_TENSOR_EXPONENT;
            } else {
                while top.clone() * pow2r(e) < max {
                    e += 1;
                }
            }
            prop_assert_eq!(got.format().exponent(), e);
            for (i, v) in exact.iter().enumerate() {
                let scaled = v / pow2r(e);
                let fl = scaled.floor();
                let frac = &scaled - &fl;
                let half = BigRational::new(1.into(), 2.into());
                let mut code = fl.to_integer();
                if frac > half || (frac == half && !(&code % 2i32).is_zero()) {
                    code += 1;
                }
                prop_assert_eq!(BigInt::from(got.codes()[i]), code);
            }
        }
    }

    fn big(v: i128) -> BigRational {
        BigRational::from_integer(BigInt::from(v))
    }

    fn pow2r(e: i32) -> BigRational {
        let p = BigRational::from_integer(BigInt::from(2).pow(e.unsigned_abs()));
        if e >= 0 { p } else { p.recip() }
    }
}
