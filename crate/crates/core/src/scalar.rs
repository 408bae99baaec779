//! Scalar abstraction and shared log-space numerics.
//!
//! All model code is generic over [`Scalar`] so the same implementation runs
//! in `f32` or `f64`. The crate root exports [`crate::Real`] (`f64`) as the
//! concrete type used by the CLI and the test suites.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + Sum<Self>
    + FromStr
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> Scalar conversion")
    }

    /// Conversion from a usize count.
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize -> Scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// log(2π), used by the diagonal Gaussian log density.
pub fn ln_two_pi<S: Scalar>() -> S {
    S::TAU().ln()
}

/// log(exp(a) + exp(b)), safe for -inf inputs.
pub fn log_add_exp<S: Scalar>(a: S, b: S) -> S {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == S::neg_infinity() {
        return S::neg_infinity();
    }
    hi + (lo - hi).exp().ln_1p()
}

/// log Σ exp(v_i) over a slice, safe for -inf entries.
pub fn log_sum_exp<S: Scalar>(vals: &[S]) -> S {
    let hi = vals.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    if hi == S::neg_infinity() {
        return S::neg_infinity();
    }
    let sum: S = vals.iter().map(|&v| (v - hi).exp()).sum();
    hi + sum.ln()
}

/// log(1 + exp(z)), overflow-safe.
pub fn softplus<S: Scalar>(z: S) -> S {
    if z > S::of(34.0) {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// log σ(z) for a Bernoulli logit.
pub fn log_sigmoid<S: Scalar>(z: S) -> S {
    -softplus(-z)
}

/// σ(z).
pub fn sigmoid<S: Scalar>(z: S) -> S {
    (S::one() + (-z).exp()).recip()
}

/// In-place softmax of a logit slice.
pub fn softmax_in_place<S: Scalar>(logits: &mut [S]) {
    let hi = logits.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for v in logits.iter_mut() {
        *v = (*v - hi).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a logit slice.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Log-softmax of a logit slice.
pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let z = log_sum_exp(logits);
    logits.iter().map(|&v| v - z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct() {
        let vals = [-1.0f64, 0.5, 2.0];
        let direct: f64 = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&vals) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_handles_neg_infinity() {
        assert_eq!(log_sum_exp::<f64>(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[f64::NEG_INFINITY, 0.0]);
        assert!((v - 0.0).abs() < 1e-15);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[0.3f64, -1.2, 4.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_consistency() {
        for &z in &[-30.0f64, -2.0, 0.0, 2.0, 40.0] {
            assert!((log_sigmoid(z) - sigmoid(z).ln()).abs() < 1e-12);
        }
    }
}
