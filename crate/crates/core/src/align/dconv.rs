//! Deformable convolution over a stack of frames.
//!
//! Every output position samples each input frame at `K*K` fractional
//! positions (regular grid plus learned offsets) via bilinear
//! interpolation with zero padding, then mixes the samples with an
//! ordinary kernel. All output channels share one offset field.

use ndarray::{Array1, Array4, ArrayView2};
use rand::Rng;

use crate::nn::{gemm_nn, gemm_nt, gemm_tn, init, Grads, ParamId, Params, Scalar};

use super::{OffsetField, KERNEL, NUM_FRAMES, OFFSET_CHANNELS};

/// Bilinear interpolation with zero padding: out-of-bounds neighbors
/// contribute 0. Total in its arguments.
pub fn bilinear_sample<F: Scalar>(plane: &ArrayView2<F>, y: F, x: F) -> F {
    let (h, w) = plane.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let y0i = y0.to_f64() as isize;
    let x0i = x0.to_f64() as isize;

    let at = |yy: isize, xx: isize| -> F {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            F::zero()
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    let one = F::one();
    at(y0i, x0i) * (one - wy) * (one - wx)
        + at(y0i, x0i + 1) * (one - wy) * wx
        + at(y0i + 1, x0i) * wy * (one - wx)
        + at(y0i + 1, x0i + 1) * wy * wx
}

/// Deformable 3x3 convolution fusing [`NUM_FRAMES`] planes into `cout`
/// channels, stride 1, implicit padding 1 (output dims equal input dims).
/// Weight layout `[cout, 3, 3, 3]` = `[cout, frame, ky, kx]`.
#[derive(Debug, Clone)]
pub struct DeformConv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cout: usize,
}

pub struct DeformConv2dCache<F> {
    frames: Array4<F>,
    offsets: Array4<F>,
    /// Deformed sample matrix per batch entry, `[n][27 * h * w]`.
    cols: Vec<Vec<F>>,
}

impl DeformConv2d {
    pub fn new<F: Scalar, R: Rng>(params: &mut Params<F>, rng: &mut R, name: &str, cout: usize) -> Self {
        let fan_in = NUM_FRAMES * KERNEL * KERNEL;
        let w = params.add(
            format!("{name}.weight"),
            init::kaiming_uniform(rng, &[cout, NUM_FRAMES, KERNEL, KERNEL], fan_in, 0.2),
            true,
        );
        let b = params.add(format!("{name}.bias"), init::zeros(&[cout]), true);
        DeformConv2d { w, b, cout }
    }

    /// `frames`: `[n, 3, h, w]`, `offsets`: `[n, 54, h, w]`.
    pub fn forward<F: Scalar>(
        &self,
        p: &Params<F>,
        frames: &Array4<F>,
        offsets: &Array4<F>,
    ) -> (Array4<F>, DeformConv2dCache<F>) {
        let (n, t, h, w) = frames.dim();
        assert_eq!(t, NUM_FRAMES, "expected {NUM_FRAMES} stacked frames");
        assert_eq!(
            offsets.dim(),
            (n, OFFSET_CHANNELS, h, w),
            "offset field must be [n, {OFFSET_CHANNELS}, h, w] matching the frames"
        );
        let taps = NUM_FRAMES * KERNEL * KERNEL;
        let hw = h * w;

        let weight = p.get(self.w);
        let weight = weight.as_slice().unwrap();
        let bias = p.get(self.b);
        let bias = bias.as_slice().unwrap();

        let mut out = Array4::<F>::zeros((n, self.cout, h, w));
        let mut cols = Vec::with_capacity(n);
        {
            let out_slice = out.as_slice_mut().unwrap();
            let frames_s = frames.as_slice().unwrap();
            let offsets_s = offsets.as_slice().unwrap();
            for ni in 0..n {
                let mut v = vec![F::zero(); taps * hw];
                deform_im2col(
                    &frames_s[ni * NUM_FRAMES * hw..(ni + 1) * NUM_FRAMES * hw],
                    &offsets_s[ni * OFFSET_CHANNELS * hw..(ni + 1) * OFFSET_CHANNELS * hw],
                    h,
                    w,
                    &mut v,
                );
                let buf = &mut out_slice[ni * self.cout * hw..(ni + 1) * self.cout * hw];
                gemm_nn(self.cout, taps, hw, F::one(), weight, &v, F::zero(), buf);
                for (c, bv) in bias.iter().enumerate() {
                    for o in &mut buf[c * hw..(c + 1) * hw] {
                        *o += *bv;
                    }
                }
                cols.push(v);
            }
        }
        (
            out,
            DeformConv2dCache {
                frames: frames.clone(),
                offsets: offsets.clone(),
                cols,
            },
        )
    }

    /// Returns (d_frames, d_offsets); accumulates dW/db when `grads` given.
    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &DeformConv2dCache<F>,
        dy: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> (Array4<F>, Array4<F>) {
        let (n, _, h, w) = cache.frames.dim();
        let taps = NUM_FRAMES * KERNEL * KERNEL;
        let hw = h * w;
        assert_eq!(dy.dim(), (n, self.cout, h, w));

        let weight = p.get(self.w);
        let weight = weight.as_slice().unwrap();

        let mut dframes = Array4::<F>::zeros((n, NUM_FRAMES, h, w));
        let mut doffsets = Array4::<F>::zeros((n, OFFSET_CHANNELS, h, w));
        let mut dw = vec![F::zero(); self.cout * taps];
        let mut db = vec![F::zero(); self.cout];
        let mut dcols = vec![F::zero(); taps * hw];

        let dy_s = dy.as_slice().unwrap();
        let frames_s = cache.frames.as_slice().unwrap();
        let offsets_s = cache.offsets.as_slice().unwrap();
        let dframes_s = dframes.as_slice_mut().unwrap();
        let doffsets_s = doffsets.as_slice_mut().unwrap();

        let want_params = grads.is_some();
        for ni in 0..n {
            let dy_n = &dy_s[ni * self.cout * hw..(ni + 1) * self.cout * hw];
            // dcols = W^T * dy
            gemm_tn(taps, self.cout, hw, F::one(), weight, dy_n, F::zero(), &mut dcols);
            deform_col2im(
                &dcols,
                &frames_s[ni * NUM_FRAMES * hw..(ni + 1) * NUM_FRAMES * hw],
                &offsets_s[ni * OFFSET_CHANNELS * hw..(ni + 1) * OFFSET_CHANNELS * hw],
                h,
                w,
                &mut dframes_s[ni * NUM_FRAMES * hw..(ni + 1) * NUM_FRAMES * hw],
                &mut doffsets_s[ni * OFFSET_CHANNELS * hw..(ni + 1) * OFFSET_CHANNELS * hw],
            );
            if want_params {
                // dW += dy * cols^T
                gemm_nt(self.cout, hw, taps, F::one(), dy_n, &cache.cols[ni], F::one(), &mut dw);
                for c in 0..self.cout {
                    db[c] += dy_n[c * hw..(c + 1) * hw].iter().copied().sum::<F>();
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            g.accumulate(
                self.w,
                ndarray::ArrayD::from_shape_vec(
                    ndarray::IxDyn(&[self.cout, NUM_FRAMES, KERNEL, KERNEL]),
                    dw,
                )
                .unwrap(),
            );
            g.accumulate(self.b, Array1::from_vec(db).into_dyn());
        }
        (dframes, doffsets)
    }
}

/// Sampling position for frame `t`, tap `k = ky*K + kx` at output pixel
/// `(oy, ox)`: regular 3x3 grid around the pixel plus the learned offset.
#[inline]
fn tap_position<F: Scalar>(oy: usize, ox: usize, ky: usize, kx: usize, off_y: F, off_x: F) -> (F, F) {
    let base_y = F::from_f64(oy as f64 + ky as f64 - 1.0);
    let base_x = F::from_f64(ox as f64 + kx as f64 - 1.0);
    (base_y + off_y, base_x + off_x)
}

/// Build the deformed sample matrix `[27, h*w]` for one batch entry.
fn deform_im2col<F: Scalar>(frames: &[F], offsets: &[F], h: usize, w: usize, cols: &mut [F]) {
    let hw = h * w;
    for t in 0..NUM_FRAMES {
        let plane = &frames[t * hw..(t + 1) * hw];
        for k in 0..KERNEL * KERNEL {
            let (ky, kx) = (k / KERNEL, k % KERNEL);
            let row = t * KERNEL * KERNEL + k;
            let off_y_plane = &offsets[((t * KERNEL * KERNEL + k) * 2) * hw..((t * KERNEL * KERNEL + k) * 2 + 1) * hw];
            let off_x_plane = &offsets[((t * KERNEL * KERNEL + k) * 2 + 1) * hw..((t * KERNEL * KERNEL + k) * 2 + 2) * hw];
            let dst = &mut cols[row * hw..(row + 1) * hw];
            for oy in 0..h {
                for ox in 0..w {
                    let i = oy * w + ox;
                    let (py, px) = tap_position(oy, ox, ky, kx, off_y_plane[i], off_x_plane[i]);
                    dst[i] = sample_plane(plane, h, w, py, px);
                }
            }
        }
    }
}

/// Scatter column gradients back to the frames (through the bilinear
/// weights) and to the offsets (through the interpolation derivative).
fn deform_col2im<F: Scalar>(
    dcols: &[F],
    frames: &[F],
    offsets: &[F],
    h: usize,
    w: usize,
    dframes: &mut [F],
    doffsets: &mut [F],
) {
    let hw = h * w;
    let one = F::one();
    for t in 0..NUM_FRAMES {
        let plane = &frames[t * hw..(t + 1) * hw];
        for k in 0..KERNEL * KERNEL {
            let (ky, kx) = (k / KERNEL, k % KERNEL);
            let row = t * KERNEL * KERNEL + k;
            let oy_base = (t * KERNEL * KERNEL + k) * 2;
            let src = &dcols[row * hw..(row + 1) * hw];
            for oy in 0..h {
                for ox in 0..w {
                    let i = oy * w + ox;
                    let g = src[i];
                    if g == F::zero() {
                        continue;
                    }
                    let off_y = offsets[oy_base * hw + i];
                    let off_x = offsets[(oy_base + 1) * hw + i];
                    let (py, px) = tap_position(oy, ox, ky, kx, off_y, off_x);

                    let y0 = py.floor();
                    let x0 = px.floor();
                    let wy = py - y0;
                    let wx = px - x0;
                    let y0i = y0.to_f64() as isize;
                    let x0i = x0.to_f64() as isize;

                    let mut v00 = F::zero();
                    let mut v01 = F::zero();
                    let mut v10 = F::zero();
                    let mut v11 = F::zero();
                    {
                        let mut scatter = |yy: isize, xx: isize, weight: F, val: &mut F| {
                            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                let idx = yy as usize * w + xx as usize;
                                *val = plane[idx];
                                dframes[t * hw + idx] += g * weight;
                            }
                        };
                        scatter(y0i, x0i, (one - wy) * (one - wx), &mut v00);
                        scatter(y0i, x0i + 1, (one - wy) * wx, &mut v01);
                        scatter(y0i + 1, x0i, wy * (one - wx), &mut v10);
                        scatter(y0i + 1, x0i + 1, wy * wx, &mut v11);
                    }
                    // d(sample)/d(py) and /d(px) of the zero-padded field
                    let dval_dy = (one - wx) * (v10 - v00) + wx * (v11 - v01);
                    let dval_dx = (one - wy) * (v01 - v00) + wy * (v11 - v10);
                    doffsets[oy_base * hw + i] += g * dval_dy;
                    doffsets[(oy_base + 1) * hw + i] += g * dval_dx;
                }
            }
        }
    }
}

#[inline]
fn sample_plane<F: Scalar>(plane: &[F], h: usize, w: usize, y: F, x: F) -> F {
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let y0i = y0.to_f64() as isize;
    let x0i = x0.to_f64() as isize;
    let one = F::one();

    let at = |yy: isize, xx: isize| -> F {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            F::zero()
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    at(y0i, x0i) * (one - wy) * (one - wx)
        + at(y0i, x0i + 1) * (one - wy) * wx
        + at(y0i + 1, x0i) * wy * (one - wx)
        + at(y0i + 1, x0i + 1) * wy * wx
}

/// Convenience wrapper taking an [`OffsetField`].
pub fn deformable_conv<F: Scalar>(
    layer: &DeformConv2d,
    p: &Params<F>,
    frames: &Array4<F>,
    offsets: &OffsetField<F>,
) -> Array4<F> {
    layer.forward(p, frames, offsets.data()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv2d_reference;
    use ndarray::{arr2, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_sample_hits_grid_values() {
        let plane = arr2(&[[0.0f64, 1.0], [2.0, 3.0]]);
        assert_eq!(bilinear_sample(&plane.view(), 0.0, 1.0), 1.0);
        assert_eq!(bilinear_sample(&plane.view(), 1.0, 0.0), 2.0);
    }

    #[test]
    fn bilinear_sample_center_averages_corners() {
        let plane = arr2(&[[0.0f64, 1.0], [2.0, 3.0]]);
        assert!((bilinear_sample(&plane.view(), 0.5, 0.5) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_sample_far_outside_is_zero() {
        let plane = arr2(&[[5.0f64, 5.0], [5.0, 5.0]]);
        assert_eq!(bilinear_sample(&plane.view(), -5.0, -5.0), 0.0);
        assert_eq!(bilinear_sample(&plane.view(), 100.0, 0.5), 0.0);
    }

    #[test]
    fn bilinear_sample_fades_across_border() {
        // half a pixel outside: only two neighbors in bounds
        let plane = arr2(&[[4.0f64, 4.0], [4.0, 4.0]]);
        assert!((bilinear_sample(&plane.view(), -0.5, 0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_offsets_reduce_to_standard_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = Params::<f32>::new();
        let dc = DeformConv2d::new(&mut p, &mut rng, "dc", 4);
        for trial in 0..50 {
            let h = rng.random_range(5..12);
            let w = rng.random_range(5..12);
            let frames = Array::from_shape_fn((1, 3, h, w), |_| rng.random_range(-1.0f32..1.0));
            let offsets = Array4::<f32>::zeros((1, OFFSET_CHANNELS, h, w));
            let (got, _) = dc.forward(&p, &frames, &offsets);
            let weight = p.get(dc.w).into_dimensionality().unwrap();
            let bias = p.get(dc.b);
            let want = conv2d_reference(&frames.view(), &weight, bias.as_slice().unwrap(), 1, 1);
            let max = (&got - &want).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max < 1e-5, "trial {trial}: max {max}");
        }
    }

    #[test]
    fn constant_offset_shifts_the_sampling() {
        // single frame tap: center tap of frame 0 with weight 1, offset
        // (+1, 0) everywhere -> output is the plane shifted up by one row
        // (sampling one row below), with zeros entering at the bottom; the
        // shift oracle is an explicit copy.
        let mut p = Params::<f64>::new();
        let w = init::zeros(&[1, NUM_FRAMES, KERNEL, KERNEL]);
        let wid = p.add("w", w, true);
        let bid = p.add("b", init::zeros(&[1]), true);
        {
            let mut wv = p.get_mut(wid);
            wv[ndarray::IxDyn(&[0, 0, 1, 1])] = 1.0; // frame 0, center tap
        }
        let dc = DeformConv2d { w: wid, b: bid, cout: 1 };

        let (h, wd) = (5usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = Array::from_shape_fn((1, 3, h, wd), |_| rng.random_range(0.0f64..1.0));
        let mut offsets = Array4::<f64>::zeros((1, OFFSET_CHANNELS, h, wd));
        // center tap of frame 0 is k=4 -> offset channels 8 (y) and 9 (x)
        offsets.slice_mut(ndarray::s![0, 8, .., ..]).fill(1.0);

        let (got, _) = dc.forward(&p, &frames, &offsets);
        let mut want = Array4::<f64>::zeros((1, 1, h, wd));
        for y in 0..h {
            for x in 0..wd {
                want[[0, 0, y, x]] = if y + 1 < h { frames[[0, 0, y + 1, x]] } else { 0.0 };
            }
        }
        let max = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "max {max}");
    }

    #[test]
    fn linear_in_input_for_fixed_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Params::<f32>::new();
        let dc = DeformConv2d::new(&mut p, &mut rng, "dc", 3);
        p.get_mut(dc.b).fill(0.0);
        let fa = Array::from_shape_fn((1, 3, 6, 6), |_| rng.random_range(-1.0f32..1.0));
        let fb = Array::from_shape_fn((1, 3, 6, 6), |_| rng.random_range(-1.0f32..1.0));
        let offsets = Array::from_shape_fn((1, OFFSET_CHANNELS, 6, 6), |_| rng.random_range(-2.0f32..2.0));
        let (ya, _) = dc.forward(&p, &fa, &offsets);
        let (yb, _) = dc.forward(&p, &fb, &offsets);
        let (yab, _) = dc.forward(&p, &(&fa * 0.3f32 + &fb * 1.7f32), &offsets);
        let want = &ya * 0.3f32 + &yb * 1.7f32;
        let max = (&yab - &want).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max < 1e-5, "max {max}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = Params::<f64>::new();
        let dc = DeformConv2d::new(&mut p, &mut rng, "dc", 2);
        let frames = Array::from_shape_fn((1, 3, 5, 5), |_| rng.random_range(-1.0f64..1.0));
        // offsets around +-1.5 exercise interpolation and border handling
        let offsets = Array::from_shape_fn((1, OFFSET_CHANNELS, 5, 5), |_| rng.random_range(-1.5f64..1.5));
        let mask = Array::from_shape_fn((1, 2, 5, 5), |_| rng.random_range(-1.0f64..1.0));

        let loss = |p: &Params<f64>, fr: &Array4<f64>, of: &Array4<f64>| (dc.forward(p, fr, of).0 * &mask).sum();

        let (_, cache) = dc.forward(&p, &frames, &offsets);
        let mut grads = Grads::new(&p);
        let (dframes, doffsets) = dc.backward(&p, &cache, &mask, Some(&mut grads));

        let h = 1e-5;
        let rel = |got: f64, fd: f64| (got - fd).abs() / fd.abs().max(1e-4);

        // input gradient
        let mut checked = 0;
        for idx in [[0usize, 0, 0, 0], [0, 1, 2, 3], [0, 2, 4, 4], [0, 0, 2, 2]] {
            let mut fp = frames.clone();
            fp[idx] += h;
            let mut fm = frames.clone();
            fm[idx] -= h;
            let fd = (loss(&p, &fp, &offsets) - loss(&p, &fm, &offsets)) / (2.0 * h);
            if fd.abs() > 1e-6 {
                assert!(rel(dframes[idx], fd) < 1e-3, "dframes {idx:?}: {} vs {fd}", dframes[idx]);
                checked += 1;
            }
        }
        assert!(checked > 0);

        // offset gradient
        checked = 0;
        for idx in [[0usize, 0, 1, 1], [0, 9, 2, 2], [0, 30, 3, 1], [0, 53, 4, 4]] {
            let mut op = offsets.clone();
            op[idx] += h;
            let mut om = offsets.clone();
            om[idx] -= h;
            let fd = (loss(&p, &frames, &op) - loss(&p, &frames, &om)) / (2.0 * h);
            if fd.abs() > 1e-6 {
                assert!(rel(doffsets[idx], fd) < 1e-3, "doffsets {idx:?}: {} vs {fd}", doffsets[idx]);
                checked += 1;
            }
        }
        assert!(checked > 0);

        // weight gradient
        let dw = grads.get(dc.w).unwrap();
        for idx in [[0usize, 0, 0, 0], [1, 2, 1, 2], [0, 1, 2, 2]] {
            let orig = p.get(dc.w)[ndarray::IxDyn(&idx)];
            let mut pp = p.clone();
            pp.get_mut(dc.w)[ndarray::IxDyn(&idx)] = orig + h;
            let fp = loss(&pp, &frames, &offsets);
            pp.get_mut(dc.w)[ndarray::IxDyn(&idx)] = orig - h;
            let fm = loss(&pp, &frames, &offsets);
            let fd = (fp - fm) / (2.0 * h);
            assert!(rel(dw[ndarray::IxDyn(&idx)], fd) < 1e-3);
        }
    }
}
