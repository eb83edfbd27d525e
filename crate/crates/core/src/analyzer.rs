//! Sweep of how much of the softmax cross-entropy gradient survives
//! quantization, as a function of class count and bit width.
//!
//! Each sample draws early-training logits `s ~ N(0, sigma^2)` for `N_c`
//! classes and a uniform ground-truth index, forms `y - t`, quantizes it with
//! a per-tensor dynamic exponent, and records how many non-target components
//! became exactly zero and the sum of the quantized gradient (zero before
//! quantization).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fixedpoint::check_bits;
use crate::qtensor::quantize_slice;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub class_sizes: Vec<usize>,
    pub bit_widths: Vec<u32>,
    /// Standard deviation of the simulated logits.
    pub logit_scale: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_sizes.is_empty() || self.bit_widths.is_empty() {
            return Err(Error::Invalid("sweep needs at least one class size and one bit width".into()));
        }
        if let Some(&c) = self.class_sizes.iter().find(|&&c| c < 2) {
            return Err(Error::Invalid(format!("class size {c} < 2")));
        }
        for &b in &self.bit_widths {
            check_bits(b)?;
        }
        if !(self.logit_scale >= 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Invalid(format!("logit scale must be >= 0, got {}", self.logit_scale)));
        }
        if self.samples == 0 {
            return Err(Error::Invalid("samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub classes: usize,
    pub bits: u32,
    /// Fraction of non-target gradient components quantized to exactly zero.
    pub zeroed_fraction: f64,
    /// Mean over samples of the sum of the quantized gradient.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, classes: usize, bits: u32) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.classes == classes && c.bits == bits)
    }

    /// CSV with header `classes,bits,zeroed_fraction,bias`, reals to 6
    /// significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("classes,bits,zeroed_fraction,bias\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{}", c.classes, c.bits, format_sig(c.zeroed_fraction, 6), format_sig(c.bias, 6));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Runs every `(classes, bits)` cell, classes-major. Each cell has its own
/// random stream derived from `(seed, classes, bits)`, so any subset of
/// cells reproduces the same numbers.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.class_sizes.len() * spec.bit_widths.len());
    for &classes in &spec.class_sizes {
        for &bits in &spec.bit_widths {
            cells.push(run_cell(spec, classes, bits)?);
        }
    }
    Ok(SweepResult { cells })
}

fn cell_rng(seed: u64, classes: usize, bits: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((classes as u64) << 8) | bits as u64);
    rng
}

fn run_cell(spec: &SweepSpec, classes: usize, bits: u32) -> Result<SweepCell> {
    let mut rng = cell_rng(spec.seed, classes, bits);
    let normal = Normal::new(0.0, spec.logit_scale).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut logits = vec![0.0f64; classes];
    let mut grad = vec![0.0f64; classes];
    let (mut zeroed, mut bias_sum) = (0usize, 0.0f64);
    for _ in 0..spec.samples {
        for s in logits.iter_mut() {
            *s = normal.sample(&mut rng);
        }
        let target = rng.random_range(0..classes);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (g, &s) in grad.iter_mut().zip(&logits) {
            *g = (s - max).exp();
            sum += *g;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            *g /= sum;
            if i == target {
                *g -= 1.0;
            }
        }
        let q = quantize_slice(vec![classes], &grad, bits)?;
        zeroed += q.codes().iter().enumerate().filter(|&(i, &c)| i != target && c == 0).count();
        bias_sum += q.dequantize_f64().iter().sum::<f64>();
    }
    Ok(SweepCell {
        classes,
        bits,
        zeroed_fraction: zeroed as f64 / (spec.samples * (classes - 1)) as f64,
        bias: bias_sum / spec.samples as f64,
    })
}

/// `%g`-style formatting: `sig` significant digits, trailing zeros dropped,
/// scientific notation for exponents below -4 or at least `sig`.
pub fn format_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{:.*e}", sig - 1, v);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -4 || exp >= sig as i32 {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
