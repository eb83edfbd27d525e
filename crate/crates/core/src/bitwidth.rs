//! Classifier bit-width advisor.
//!
//! A quantized softmax gradient at bit width `bw` keeps its non-ground-truth
//! components (about `1/|class|` each) from rounding away when
//! `alpha / (|class| - 1) >= 2^-(bw - 1)`. The smallest width satisfying the
//! strict form of that bound is `floor(log2(|class| - 1) + log2(2 / alpha)) + 1`.
//!
//! Both tests are evaluated exactly as `alpha * 2^(bw-1)` against
//! `|class| - 1`; scaling a binary float by a power of two is exact.

use crate::error::{Error, Result};
use crate::scalar::{pow2, Scalar};

/// Default round-off budget.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvisorQuery<T = f64> {
    num_classes: u64,
    alpha: T,
}

impl<T: Scalar> AdvisorQuery<T> {
    pub fn new(num_classes: u64, alpha: T) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::Invalid(format!("alpha must be in (0, 1), got {alpha}")));
        }
        Ok(AdvisorQuery { num_classes, alpha })
    }

    pub fn num_classes(&self) -> u64 {
        self.num_classes
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    /// `log2(|class| - 1) + log2(2 / alpha)`, the real-valued lower bound.
    pub fn bound(&self) -> f64 {
        ((self.num_classes - 1) as f64).log2() + (2.0 / self.alpha.to_f64_exact()).log2()
    }

    fn scaled_alpha(&self, bw: u32) -> f64 {
        self.alpha.to_f64_exact() * pow2(bw as i32 - 1)
    }
}

/// Whether `alpha / (|class| - 1) >= 2^-(bw - 1)`.
pub fn feasible<T: Scalar>(bw: u32, q: &AdvisorQuery<T>) -> bool {
    bw >= 1 && q.scaled_alpha(bw) >= (q.num_classes - 1) as f64
}

/// Smallest `bw` with `bw > log2(|class| - 1) + log2(2 / alpha)`.
pub fn required_bits<T: Scalar>(q: &AdvisorQuery<T>) -> u32 {
    // bw > log2((c - 1) * 2 / alpha)  <=>  alpha * 2^(bw-1) > c - 1
    let target = (q.num_classes - 1) as f64;
    (1u32..).find(|&bw| q.scaled_alpha(bw) > target).expect("alpha > 0 makes the bound finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn q(c: u64, a: f64) -> AdvisorQuery<f64> {
        AdvisorQuery::new(c, a).unwrap()
    }

    #[test]
    fn feasibility_examples() {
        assert!(feasible(2, &q(2, 0.5)));
        assert!(!feasible(8, &q(1000, 0.5)));
        assert!(feasible(12, &q(1000, 0.5)));
        assert!(!feasible(11, &q(1000, 0.5)));
    }

    #[test]
    fn required_bits_examples() {
        assert_eq!(required_bits(&q(10, 0.5)), 6);
        assert_eq!(required_bits(&q(1000, 0.125)), 14);
        assert_eq!(required_bits(&q(2, 0.5)), 3);
        assert_eq!(required_bits(&q(1000, 0.5)), 12);
        assert_eq!(required_bits(&AdvisorQuery::new(10, 0.5f32).unwrap()), 6);
        assert!((q(1000, 0.125).bound() - 13.964).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_queries() {
        assert!(AdvisorQuery::new(1, 0.5).is_err());
        assert!(AdvisorQuery::new(10, 0.0).is_err());
        assert!(AdvisorQuery::new(10, 1.0).is_err());
        assert!(AdvisorQuery::new(10, f64::NAN).is_err());
    }

    /// Exact rational version of the strict bound: 2^bw > 2 (c - 1) / alpha.
    fn oracle_required_bits(c: u64, alpha: f64) -> u32 {
        let a = BigRational::from_float(alpha).unwrap();
        let rhs = BigRational::from_integer(BigInt::from(2 * (c - 1))) / a;
        (1u32..).find(|&bw| BigRational::from_integer(BigInt::from(1) << bw as usize) > rhs).unwrap()
    }

    proptest! {
        #[test]
        fn matches_exact_oracle(c in 2u64..100_000, alpha in 0.001f64..0.999) {
            prop_assert_eq!(required_bits(&q(c, alpha)), oracle_required_bits(c, alpha));
        }

        #[test]
        fn boundary_alphas_match_oracle(c in 2u64..5000, k in 1u32..12) {
            // Powers of two put (c - 1) * 2 / alpha on an exact boundary more often.
            let alpha = 2f64.powi(-(k as i32));
            prop_assert_eq!(required_bits(&q(c, alpha)), oracle_required_bits(c, alpha));
        }

        #[test]
        fn monotone(c in 2u64..10_000, dc in 0u64..1000, a in 0.01f64..0.99, da in 0.0f64..0.5) {
            let a2 = (a + da).min(0.99);
            prop_assert!(required_bits(&q(c, a)) <= required_bits(&q(c + dc, a)));
            prop_assert!(required_bits(&q(c, a2)) <= required_bits(&q(c, a)));
        }

        /// The returned width is always feasible; one bit less is feasible only
        /// at exact equality `alpha * 2^(bw-2) = c - 1`.
        #[test]
        fn consistent_with_feasible(c in 2u64..100_000, alpha in 0.001f64..0.999) {
            let query = q(c, alpha);
            let bw = required_bits(&query);
            prop_assert!(feasible(bw, &query));
            if bw > 1 && feasible(bw - 1, &query) {
                prop_assert_eq!(alpha * 2f64.powi(bw as i32 - 2), (c - 1) as f64);
            }
        }
    }

    #[test]
    fn equality_boundary_differs_by_one_bit() {
        // 0.5 * 2^(bw-1) = 1 at bw = 2: feasible, but the strict bound needs 3.
        let query = q(2, 0.5);
        assert!(feasible(2, &query));
        assert_eq!(required_bits(&query), 3);
    }
}
