//! Minimal neural-network toolkit: tensors are `ndarray` arrays in NCHW
//! layout, every layer implements an explicit forward/backward pair, and
//! parameters live in a flat registry so optimizers and checkpoints can
//! walk them uniformly.
//!
//! Everything is generic over [`Scalar`] (f32 for training, f64 for
//! finite-difference gradient checks) and strictly single-threaded, which
//! makes runs bit-reproducible on a given platform.

mod act;
mod adam;
mod conv;
mod linear;
mod norm;
mod params;
mod resize;

pub mod init;

pub use act::{leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, softplus, softplus_backward};
pub use adam::{Adam, AdamConfig};
pub use conv::{conv2d_reference, im2col, Conv2d, Conv2dCache};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm2d, BatchNorm2dCache, InstanceNorm2d, InstanceNorm2dCache, Mode};
pub use params::{Grads, ParamId, Params};
pub use resize::{
    crop_hw, downsample2_avg, max_pool2, max_pool2_backward, reflect_pad_hw, reflect_pad_hw_backward,
    upsample2_bilinear, upsample2_bilinear_backward, zero_pad_grad_hw,
};

use num_traits::Float;

/// Scalar element for all tensor math. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + ndarray::ScalarOperand
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C = alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
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

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
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

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major C = alpha * A * B + beta * C.
pub fn gemm_nn<F: Scalar>(m: usize, k: usize, n: usize, alpha: F, a: &[F], b: &[F], beta: F, c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major C = alpha * A^T * B + beta * C, with A stored as (k, m).
pub fn gemm_tn<F: Scalar>(m: usize, k: usize, n: usize, alpha: F, a: &[F], b: &[F], beta: F, c: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major C = alpha * A * B^T + beta * C, with B stored as (n, k).
pub fn gemm_nt<F: Scalar>(m: usize, k: usize, n: usize, alpha: F, a: &[F], b: &[F], beta: F, c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial size of a strided convolution with symmetric padding.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}
