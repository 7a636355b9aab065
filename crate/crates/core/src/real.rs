use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the probe kernels are generic over.
///
/// Training and inference run in `f32`; gradient checks instantiate the same
/// kernels in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits in float type")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in float type")
    }

    fn from_f32_lossless(x: f32) -> Self;

    fn to_f32_lossy(self) -> f32;
}

impl Real for f32 {
    fn from_f32_lossless(x: f32) -> Self {
        x
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f32_lossless(x: f32) -> Self {
        x as f64
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out += alpha * x`
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], out: &mut [F]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// In-place softmax over `xs`, stable under large inputs.
pub(crate) fn softmax_in_place<F: Real>(xs: &mut [F]) {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// `log(sum(exp(xs)))`
pub(crate) fn log_sum_exp<F: Real>(xs: &[F]) -> F {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let total: F = xs.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}
