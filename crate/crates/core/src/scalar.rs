//! Scalar abstraction over `f32` and `f64`.
//!
//! All model code is generic over [`Scalar`]. Training and inference run in
//! `f32`; gradient tests rerun the identical graphs in `f64` so that central
//! finite differences are accurate enough to validate the `f32` backward
//! pass at tight tolerances.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ScalarOperand};
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Scalar:
    num_traits::Float
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` via the deterministic sequential gemm.
    fn gemm(
        alpha: Self,
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        beta: Self,
        c: ArrayViewMut2<'_, Self>,
    );

    fn standard_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        alpha: Self,
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        beta: Self,
        mut c: ArrayViewMut2<'_, Self>,
    ) {
        general_mat_mul(alpha, &a, &b, beta, &mut c);
    }

    #[inline]
    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        // Sampled in f64 so f32 and f64 runs share one stream layout.
        let v: f64 = rng.sample(StandardNormal);
        v as f32
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        alpha: Self,
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        beta: Self,
        mut c: ArrayViewMut2<'_, Self>,
    ) {
        general_mat_mul(alpha, &a, &b, beta, &mut c);
    }

    #[inline]
    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}
