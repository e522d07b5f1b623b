//! Deterministic block-transform degradation standing in for a real video
//! encoder: 8x8 orthonormal DCT-II per block, uniform quantization of the
//! coefficients with the HEVC step law `Qstep = 2^((qp-4)/6)`, inverse
//! transform, clip.
//!
//! Coefficients are taken in the 8-bit luma scale (pixels * 255), where the
//! step law is defined; at qp = 4 the step is exactly 1 and integral
//! coefficients survive the round trip unchanged.

use ndarray::Array2;

use crate::error::{Error, Result};

use super::LumaFrame;

const B: usize = 8;

/// Orthonormal 8x8 DCT-II basis, row k = basis function k.
fn dct_basis() -> [[f64; B]; B] {
    let mut m = [[0.0f64; B]; B];
    for (k, row) in m.iter_mut().enumerate() {
        let c = if k == 0 { (1.0 / B as f64).sqrt() } else { (2.0 / B as f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = c * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * B as f64)).cos();
        }
    }
    m
}

/// Quantization step for a QP in `0..=51`.
pub fn qstep(qp: u8) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

/// Apply blockwise DCT quantization at the given QP. Deterministic; edge
/// blocks are zero-padded and cropped back.
pub fn degrade(frame: &LumaFrame, qp: u8) -> Result<LumaFrame> {
    if qp > 51 {
        return Err(Error::InvalidQp { qp: qp as i64 });
    }
    let step = qstep(qp);
    let basis = dct_basis();
    let (h, w) = (frame.height(), frame.width());
    let bh = h.div_ceil(B);
    let bw = w.div_ceil(B);

    let mut out = Array2::<f32>::zeros((h, w));
    let src = frame.pixels();
    let mut block = [[0.0f64; B]; B];
    let mut tmp = [[0.0f64; B]; B];
    let mut coef = [[0.0f64; B]; B];

    for by in 0..bh {
        for bx in 0..bw {
            let y0 = by * B;
            let x0 = bx * B;
            for r in 0..B {
                for c in 0..B {
                    let (y, x) = (y0 + r, x0 + c);
                    block[r][c] = if y < h && x < w { src[[y, x]] as f64 * 255.0 } else { 0.0 };
                }
            }
            // coef = basis * block * basis^T
            mat_mul(&basis, &block, &mut tmp);
            mat_mul_bt(&tmp, &basis, &mut coef);
            for row in coef.iter_mut() {
                for v in row.iter_mut() {
                    *v = (*v / step).round() * step;
                }
            }
            // block = basis^T * coef * basis
            mat_mul_at(&basis, &coef, &mut tmp);
            mat_mul(&tmp, &basis, &mut block);
            for r in 0..B {
                for c in 0..B {
                    let (y, x) = (y0 + r, x0 + c);
                    if y < h && x < w {
                        out[[y, x]] = (block[r][c] / 255.0).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    LumaFrame::new(out)
}

fn mat_mul(a: &[[f64; B]; B], b: &[[f64; B]; B], out: &mut [[f64; B]; B]) {
    for i in 0..B {
        for j in 0..B {
            let mut acc = 0.0;
            for (k, bk) in b.iter().enumerate() {
                acc += a[i][k] * bk[j];
            }
            out[i][j] = acc;
        }
    }
}

/// out = a * b^T
fn mat_mul_bt(a: &[[f64; B]; B], b: &[[f64; B]; B], out: &mut [[f64; B]; B]) {
    for i in 0..B {
        for (j, bj) in b.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..B {
                acc += a[i][k] * bj[k];
            }
            out[i][j] = acc;
        }
    }
}

/// out = a^T * b
fn mat_mul_at(a: &[[f64; B]; B], b: &[[f64; B]; B], out: &mut [[f64; B]; B]) {
    for i in 0..B {
        for j in 0..B {
            let mut acc = 0.0;
            for (k, ak) in a.iter().enumerate() {
                acc += ak[i] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
}
