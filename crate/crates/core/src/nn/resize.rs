//! Spatial resampling and padding helpers with exact transpose backwards.

use ndarray::{Array2, Array4};

use super::Scalar;

/// Bilinear 2x upsampling, half-pixel centers, edge-clamped (the usual
/// `align_corners=false` convention).
pub fn upsample2_bilinear<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h * 2, w * 2);
    let ytab = axis_table::<F>(h, ho);
    let xtab = axis_table::<F>(w, wo);
    let mut out = Array4::<F>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(ndarray::s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(ndarray::s![ni, ci, .., ..]);
            for oy in 0..ho {
                let (y0, y1, wy) = ytab[oy];
                for ox in 0..wo {
                    let (x0, x1, wx) = xtab[ox];
                    let top = src[[y0, x0]] * (F::one() - wx) + src[[y0, x1]] * wx;
                    let bot = src[[y1, x0]] * (F::one() - wx) + src[[y1, x1]] * wx;
                    dst[[oy, ox]] = top * (F::one() - wy) + bot * wy;
                }
            }
        }
    }
    out
}

/// Transpose of [`upsample2_bilinear`]: scatter output gradients back.
pub fn upsample2_bilinear_backward<F: Scalar>(dy: &Array4<F>, in_h: usize, in_w: usize) -> Array4<F> {
    let (n, c, ho, wo) = dy.dim();
    debug_assert_eq!((ho, wo), (in_h * 2, in_w * 2));
    let ytab = axis_table::<F>(in_h, ho);
    let xtab = axis_table::<F>(in_w, wo);
    let mut dx = Array4::<F>::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            let src = dy.slice(ndarray::s![ni, ci, .., ..]);
            let mut dst = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
            for oy in 0..ho {
                let (y0, y1, wy) = ytab[oy];
                for ox in 0..wo {
                    let (x0, x1, wx) = xtab[ox];
                    let g = src[[oy, ox]];
                    dst[[y0, x0]] += g * (F::one() - wy) * (F::one() - wx);
                    dst[[y0, x1]] += g * (F::one() - wy) * wx;
                    dst[[y1, x0]] += g * wy * (F::one() - wx);
                    dst[[y1, x1]] += g * wy * wx;
                }
            }
        }
    }
    dx
}

/// (low index, high index, weight of high) for each output coordinate.
fn axis_table<F: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, F)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let u = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (u.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, F::from_f64(u - lo as f64))
        })
        .collect()
}

/// 2x2 max pooling, stride 2, floor semantics for odd inputs. Returns the
/// pooled tensor and flat argmax indices into each (n, c) plane.
pub fn max_pool2<F: Scalar>(x: &Array4<F>) -> (Array4<F>, ndarray::Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<F>::zeros((n, c, ho, wo));
    let mut arg = ndarray::Array4::<usize>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(ndarray::s![ni, ci, .., ..]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = src[[oy * 2, ox * 2]];
                    let mut best_idx = oy * 2 * w + ox * 2;
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let v = src[[oy * 2 + dy, ox * 2 + dx]];
                        if v > best {
                            best = v;
                            best_idx = (oy * 2 + dy) * w + ox * 2 + dx;
                        }
                    }
                    out[[ni, ci, oy, ox]] = best;
                    arg[[ni, ci, oy, ox]] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<F: Scalar>(
    dy: &Array4<F>,
    arg: &ndarray::Array4<usize>,
    in_h: usize,
    in_w: usize,
) -> Array4<F> {
    let (n, c, ho, wo) = dy.dim();
    let mut dx = Array4::<F>::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
            let plane = plane.as_slice_mut().unwrap();
            for oy in 0..ho {
                for ox in 0..wo {
                    plane[arg[[ni, ci, oy, ox]]] += dy[[ni, ci, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Pad bottom/right by reflection (no edge repeat) so H and W become
/// multiples of `multiple`. Returns the padded tensor and (pad_h, pad_w).
pub fn reflect_pad_hw<F: Scalar>(x: &Array4<F>, multiple: usize) -> (Array4<F>, (usize, usize)) {
    let (n, c, h, w) = x.dim();
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        return (x.clone(), (0, 0));
    }
    assert!(ph < h && pw < w, "frame too small to reflect-pad");
    let mut out = Array4::<F>::zeros((n, c, h + ph, w + pw));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(ndarray::s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(ndarray::s![ni, ci, .., ..]);
            for oy in 0..h + ph {
                let sy = reflect_index(oy, h);
                for ox in 0..w + pw {
                    dst[[oy, ox]] = src[[sy, reflect_index(ox, w)]];
                }
            }
        }
    }
    (out, (ph, pw))
}

/// Transpose of [`reflect_pad_hw`]: fold padded-region gradients back onto
/// their source pixels.
pub fn reflect_pad_hw_backward<F: Scalar>(dy: &Array4<F>, in_h: usize, in_w: usize) -> Array4<F> {
    let (n, c, hp, wp) = dy.dim();
    let mut dx = Array4::<F>::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            let src = dy.slice(ndarray::s![ni, ci, .., ..]);
            let mut dst = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
            for oy in 0..hp {
                let sy = reflect_index(oy, in_h);
                for ox in 0..wp {
                    dst[[sy, reflect_index(ox, in_w)]] += src[[oy, ox]];
                }
            }
        }
    }
    dx
}

fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * len - 2 - i
    }
}

/// Crop to the top-left `h x w` region.
pub fn crop_hw<F: Scalar>(x: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    x.slice(ndarray::s![.., .., ..h, ..w]).to_owned()
}

/// Transpose of [`crop_hw`]: zero-extend a cropped gradient back to the
/// padded size.
pub fn zero_pad_grad_hw<F: Scalar>(dy: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c, hc, wc) = dy.dim();
    let mut out = Array4::<F>::zeros((n, c, h, w));
    out.slice_mut(ndarray::s![.., .., ..hc, ..wc]).assign(dy);
    out
}

/// Frame-level bilinear downscale by 2 (box-filter 2x2 average), used by the
/// optical-flow pyramid.
pub fn downsample2_avg<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let (h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64(0.25);
    Array2::from_shape_fn((ho, wo), |(i, j)| {
        (x[[2 * i, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j]] + x[[2 * i + 1, 2 * j + 1]]) * quarter
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Array4::from_elem((1, 1, 3, 5), 0.7f64);
        let y = upsample2_bilinear(&x);
        assert_eq!(y.dim(), (1, 1, 6, 10));
        assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_backward_is_transpose() {
        // <U x, y> == <x, U^T y> for random x, y
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array::from_shape_fn((1, 2, 4, 3), |_| rng.random_range(-1.0..1.0f64));
        let y = Array::from_shape_fn((1, 2, 8, 6), |_| rng.random_range(-1.0..1.0f64));
        let ux = upsample2_bilinear(&x);
        let uty = upsample2_bilinear_backward(&y, 4, 3);
        let lhs = (&ux * &y).sum();
        let rhs = (&x * &uty).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn reflect_pad_rounds_up_to_multiple() {
        let x = Array4::from_shape_fn((1, 1, 5, 6), |(_, _, i, j)| (i * 10 + j) as f64);
        let (y, (ph, pw)) = reflect_pad_hw(&x, 4);
        assert_eq!((ph, pw), (3, 2));
        assert_eq!(y.dim(), (1, 1, 8, 8));
        // row 5 reflects row 3, row 6 -> row 2, row 7 -> row 1
        assert_eq!(y[[0, 0, 5, 0]], x[[0, 0, 3, 0]]);
        assert_eq!(y[[0, 0, 7, 2]], x[[0, 0, 1, 2]]);
        assert_eq!(y[[0, 0, 0, 7]], x[[0, 0, 0, 3]]);
    }

    #[test]
    fn maxpool_picks_first_of_ties() {
        let x = arr2(&[[1.0f64, 1.0], [1.0, 1.0]]).insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        let (y, arg) = max_pool2(&x.into_dimensionality().unwrap());
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert_eq!(arg[[0, 0, 0, 0]], 0);
    }
}
