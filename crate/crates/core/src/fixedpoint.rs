//! Dynamic fixed-point numbers.
//!
//! A [`FixedPointFormat`] is a signed two's-complement integer grid with a
//! power-of-two step `2^exponent` shared by every element of a tensor. The
//! exponent is "dynamic": it is re-derived from the tensor contents each time
//! the tensor is quantized (see [`choose_exponent`]).
//!
//! Rounding is round-half-to-even and out-of-range values saturate.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{pow2, Scalar};

/// Exponent assigned to a tensor whose elements are all zero.
pub const ZERO_TENSOR_EXPONENT: i32 = -20;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointFormat {
    bit_width: u32,
    exponent: i32,
}

impl FixedPointFormat {
    pub fn new(bit_width: u32, exponent: i32) -> Result<Self> {
        check_bits(bit_width)?;
        Ok(FixedPointFormat { bit_width, exponent })
    }

    #[inline]
    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    #[inline]
    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    #[inline]
    pub fn min_code(&self) -> i64 {
        min_code(self.bit_width)
    }

    #[inline]
    pub fn max_code(&self) -> i64 {
        max_code(self.bit_width)
    }

    /// Value of one code increment, `2^exponent`.
    #[inline]
    pub fn step(&self) -> f64 {
        pow2(self.exponent)
    }

    /// Largest representable magnitude on the positive side.
    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    #[inline]
    pub fn contains_code(&self, code: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&code)
    }

    /// Nearest code for a finite `x`, rounding half to even and saturating.
    #[inline]
    pub(crate) fn code_of(&self, x: f64) -> i64 {
        debug_assert!(x.is_finite());
        let scaled = scale_pow2(x, -self.exponent).round_ties_even();
        if scaled >= self.max_code() as f64 {
            self.max_code()
        } else if scaled <= self.min_code() as f64 {
            self.min_code()
        } else {
            scaled as i64
        }
    }

    #[inline]
    pub(crate) fn value_of(&self, code: i64) -> f64 {
        scale_pow2(code as f64, self.exponent)
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "INT{}@2^{}", self.bit_width, self.exponent)
    }
}

/// One element of the quantization grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QValue {
    code: i64,
    format: FixedPointFormat,
}

impl QValue {
    pub fn new(code: i64, format: FixedPointFormat) -> Result<Self> {
        if !format.contains_code(code) {
            return Err(Error::CodeRange { code, bits: format.bit_width() });
        }
        Ok(QValue { code, format })
    }

    #[inline]
    pub fn code(&self) -> i64 {
        self.code
    }

    #[inline]
    pub fn format(&self) -> FixedPointFormat {
        self.format
    }
}

pub(crate) fn check_bits(bit_width: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bit_width) {
        Ok(())
    } else {
        Err(Error::BitWidth(bit_width))
    }
}

#[inline]
pub(crate) fn min_code(bit_width: u32) -> i64 {
    -(1i64 << (bit_width - 1))
}

#[inline]
pub(crate) fn max_code(bit_width: u32) -> i64 {
    (1i64 << (bit_width - 1)) - 1
}

/// `x * 2^k` without intermediate overflow of the power of two.
#[inline]
pub(crate) fn scale_pow2(x: f64, k: i32) -> f64 {
    if (-1022..=1023).contains(&k) {
        x * pow2(k)
    } else {
        let half = k / 2;
        x * pow2(half) * pow2(k - half)
    }
}

/// Smallest exponent `e` with `max|values| <= (2^(bit_width-1) - 1) * 2^e`.
///
/// An all-zero tensor gets [`ZERO_TENSOR_EXPONENT`].
pub fn choose_exponent<T: Scalar>(values: &[T], bit_width: u32) -> Result<i32> {
    choose_exponent_with_floor(values, bit_width, ZERO_TENSOR_EXPONENT)
}

pub fn choose_exponent_with_floor<T: Scalar>(
    values: &[T],
    bit_width: u32,
    zero_exponent: i32,
) -> Result<i32> {
    check_bits(bit_width)?;
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mut max_abs = 0f64;
    for v in values {
        let v = v.to_f64_exact();
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        max_abs = max_abs.max(v.abs());
    }
    Ok(exponent_for_max(max_abs, bit_width, zero_exponent))
}

pub(crate) fn exponent_for_max(max_abs: f64, bit_width: u32, zero_exponent: i32) -> i32 {
    if max_abs == 0.0 {
        return zero_exponent;
    }
    let top = max_code(bit_width) as f64;
    let biased = ((max_abs.to_bits() >> 52) & 0x7ff) as i32;
    let mut e = if biased == 0 {
        (max_abs / top).log2().ceil() as i32
    } else {
        // floor(log2 max_abs) - floor(log2 top)
        biased - 1023 - (bit_width as i32 - 2)
    };
    // The guess is within one of the exact minimum.
    while scale_pow2(top, e) < max_abs {
        e += 1;
    }
    while scale_pow2(top, e - 1) >= max_abs {
        e -= 1;
    }
    e
}

/// Smallest exponent whose grid holds every exact integer `acc * 2^acc_exponent`.
///
/// The integer analogue of [`choose_exponent`], used to requantize exact
/// accumulators without going through floating point.
pub(crate) fn exponent_for_max_int(max_abs: u64, acc_exponent: i32, bit_width: u32, zero_exponent: i32) -> i32 {
    if max_abs == 0 {
        return zero_exponent;
    }
    let top = max_code(bit_width) as u128;
    let max_abs = max_abs as u128;
    // Find the smallest shift s (possibly negative) with max_abs <= top * 2^s.
    let mut s: i32 = 0;
    if max_abs <= top {
        while s > -126 && (max_abs << (-(s - 1)) as u32) <= top {
            s -= 1;
        }
    } else {
        while (top << s as u32) < max_abs {
            s += 1;
        }
    }
    acc_exponent + s
}

/// Round-half-to-even of `v / 2^shift` for `shift >= 0`.
#[inline]
pub(crate) fn shr_round_half_even(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    if shift >= 127 {
        return 0;
    }
    let q = v >> shift;
    let r = v - (q << shift);
    let half = 1i128 << (shift - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Quantize one real number onto `format`'s grid.
pub fn quantize<T: Scalar>(x: T, format: FixedPointFormat) -> Result<QValue> {
    let x = x.to_f64_exact();
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(QValue { code: format.code_of(x), format })
}

/// `code * 2^exponent`; exact in f64 whenever the code fits in 53 bits.
pub fn dequantize<T: Scalar>(q: QValue) -> T {
    T::from_f64_lossy(q.format.value_of(q.code))
}

/// Parameter-update precision, in bits excluding sign, of an `m`-bit
/// parameter paired with an `n`-bit accumulator that overlap in `k` bits.
pub fn effective_update_bits(m: u32, n: u32, k: u32) -> Result<u32> {
    if m < 2 || n < 2 {
        return Err(Error::Invalid(format!("bit widths must be >= 2 (m = {m}, n = {n})")));
    }
    if k > m.min(n) {
        return Err(Error::Invalid(format!("overlap k = {k} exceeds min(m, n) = {}", m.min(n))));
    }
    Ok(m + n - 2 - k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmt(bits: u32, e: i32) -> FixedPointFormat {
        FixedPointFormat::new(bits, e).unwrap()
    }

    /// Brute force over a window of exponents, checking the post-condition.
    fn brute_force_exponent(max_abs: f64, bits: u32) -> i32 {
        let top = max_code(bits) as f64;
        (-60..60).find(|&e| max_abs <= top * 2f64.powi(e)).unwrap()
    }

    #[test]
    fn format_ranges() {
        let f = fmt(8, -7);
        assert_eq!((f.min_code(), f.max_code()), (-128, 127));
        assert_eq!(f.step(), 1.0 / 128.0);
        let f = fmt(32, 0);
        assert_eq!((f.min_code(), f.max_code()), (i32::MIN as i64, i32::MAX as i64));
        assert!(FixedPointFormat::new(1, 0).is_err());
        assert!(FixedPointFormat::new(33, 0).is_err());
        assert_eq!(fmt(8, -7), fmt(8, -7));
        assert_ne!(fmt(8, -7), fmt(8, -6));
        assert_ne!(fmt(8, -7), fmt(16, -7));
    }

    #[test]
    fn choose_exponent_examples() {
        assert_eq!(brute_force_exponent(1.0, 8), -6);
        // 127 * 2^-7 < 1.0 <= 127 * 2^-6
        assert_eq!(choose_exponent(&[0.25f64, -1.0, 0.5], 8).unwrap(), -6);
        assert_eq!(choose_exponent(&[0.0f64; 5], 8).unwrap(), ZERO_TENSOR_EXPONENT);
        assert_eq!(choose_exponent(&[127.0f64 / 128.0], 8).unwrap(), -7);
        assert_eq!(choose_exponent_with_floor(&[0.0f32], 8, -9).unwrap(), -9);
        assert!(matches!(choose_exponent::<f64>(&[], 8), Err(Error::EmptyTensor)));
        assert!(matches!(choose_exponent(&[f64::NAN], 8), Err(Error::NonFinite)));
    }

    #[test]
    fn quantize_examples() {
        let f = fmt(8, -7);
        assert_eq!(quantize(0.0f64, fmt(4, 3)).unwrap().code(), 0);
        // 0.30 * 128 = 38.4
        assert_eq!(quantize(0.30f64, f).unwrap().code(), 38);
        assert_eq!(quantize(10.0f64, f).unwrap().code(), 127);
        assert_eq!(quantize(-10.0f64, f).unwrap().code(), -128);
        assert!(matches!(quantize(f64::INFINITY, f), Err(Error::NonFinite)));
        // ties go to even
        assert_eq!(quantize(2.5f64, fmt(8, 0)).unwrap().code(), 2);
        assert_eq!(quantize(3.5f64, fmt(8, 0)).unwrap().code(), 4);
        assert_eq!(quantize(-2.5f64, fmt(8, 0)).unwrap().code(), -2);
    }

    #[test]
    fn dequantize_examples() {
        let f = fmt(8, -7);
        assert_eq!(dequantize::<f64>(QValue::new(0, f).unwrap()), 0.0);
        assert_eq!(dequantize::<f64>(QValue::new(38, f).unwrap()), 0.296875);
        assert_eq!(dequantize::<f32>(QValue::new(-128, f).unwrap()), -1.0);
        assert!(QValue::new(128, f).is_err());
    }

    #[test]
    fn effective_bits() {
        assert_eq!(effective_update_bits(8, 16, 0).unwrap(), 22);
        assert_eq!(effective_update_bits(8, 8, 8).unwrap(), 6);
        assert_eq!(effective_update_bits(16, 16, 4).unwrap(), 26);
        assert!(effective_update_bits(8, 16, 9).is_err());
        assert!(effective_update_bits(1, 16, 0).is_err());
    }

    #[test]
    fn integer_shift_rounding() {
        assert_eq!(shr_round_half_even(5, 1), 2);
        assert_eq!(shr_round_half_even(7, 1), 4);
        assert_eq!(shr_round_half_even(-5, 1), -2);
        assert_eq!(shr_round_half_even(-7, 1), -4);
        assert_eq!(shr_round_half_even(6, 2), 2);
        assert_eq!(shr_round_half_even(-6, 2), -2);
        assert_eq!(shr_round_half_even(9, 3), 1);
    }

    proptest! {
        #[test]
        fn choose_exponent_is_minimal(vals in prop::collection::vec(-1e6f64..1e6, 1..20), bits in 2u32..=32) {
            let e = choose_exponent(&vals, bits).unwrap();
            let max = vals.iter().fold(0f64, |m, v| m.max(v.abs()));
            if max > 0.0 {
                prop_assert_eq!(e, brute_force_exponent(max, bits));
            }
        }

        #[test]
        fn integer_exponent_agrees_with_float(acc in -(1i64 << 50)..(1i64 << 50), acc_e in -40i32..20, bits in 2u32..=32) {
            let real = acc as f64 * 2f64.powi(acc_e);
            let want = choose_exponent(&[real], bits).unwrap();
            let got = exponent_for_max_int(acc.unsigned_abs(), acc_e, bits, ZERO_TENSOR_EXPONENT);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn shift_rounding_matches_float(v in -(1i64 << 40)..(1i64 << 40), s in 0u32..30) {
            let want = (v as f64 / 2f64.powi(s as i32)).round_ties_even() as i128;
            prop_assert_eq!(shr_round_half_even(v as i128, s), want);
        }

        #[test]
        fn round_trip_within_half_step(x in -1e3f64..1e3, bits in 2u32..=24, e in -20i32..4) {
            let f = fmt(bits, e);
            prop_assume!(x.abs() <= f.max_value());
            let back: f64 = dequantize(quantize(x, f).unwrap());
            prop_assert!((back - x).abs() <= f.step() / 2.0);
        }

        #[test]
        fn saturation_bound(x in -1e9f64..1e9, bits in 2u32..=24, e in -20i32..4) {
            let f = fmt(bits, e);
            let back: f64 = dequantize(quantize(x, f).unwrap());
            // Two's-complement range: one extra code on the negative side.
            prop_assert!(back <= f.max_value());
            prop_assert!(back >= f.min_code() as f64 * f.step());
        }

        #[test]
        fn idempotent(bits in 2u32..=32, e in -30i32..30, raw in any::<i64>()) {
            let f = fmt(bits, e);
            let code = f.min_code() + raw.rem_euclid(f.max_code() - f.min_code() + 1);
            let q = QValue::new(code, f).unwrap();
            prop_assert_eq!(quantize(dequantize::<f64>(q), f).unwrap(), q);
        }

        #[test]
        fn monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, bits in 2u32..=16, e in -12i32..4) {
            let f = fmt(bits, e);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, f).unwrap().code() <= quantize(hi, f).unwrap().code());
        }
    }
}
