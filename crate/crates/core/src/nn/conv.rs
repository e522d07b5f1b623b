use ndarray::{Array1, Array4, ArrayView3, ArrayView4};
use rand::Rng;

use super::{conv_out_dim, gemm_nn, gemm_nt, gemm_tn, init, Grads, ParamId, Params, Scalar};

/// Standard 2-D convolution, zero padding, square kernel, NCHW activations.
/// Weight layout is `[cout, cin, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Forward state kept for the backward pass.
pub struct Conv2dCache<F> {
    x: Array4<F>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = init::kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k, 0.2);
        Self::with_weights(params, name, w, init::zeros(&[cout]), stride, pad)
    }

    /// D-style init: N(0, 0.02) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new_normal<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = init::normal(rng, &[cout, cin, k, k], 0.02);
        Self::with_weights(params, name, w, init::zeros(&[cout]), stride, pad)
    }

    /// All-zero weights and bias (offset heads, output heads under test).
    pub fn new_zeros<F: Scalar>(
        params: &mut Params<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::with_weights(
            params,
            name,
            init::zeros(&[cout, cin, k, k]),
            init::zeros(&[cout]),
            stride,
            pad,
        )
    }

    fn with_weights<F: Scalar>(
        params: &mut Params<F>,
        name: &str,
        w: ndarray::ArrayD<F>,
        b: ndarray::ArrayD<F>,
        stride: usize,
        pad: usize,
    ) -> Self {
        let shape = w.shape().to_vec();
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        let w = params.add(format!("{name}.weight"), w, true);
        let b = params.add(format!("{name}.bias"), b, true);
        Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_dim(h, self.k, self.stride, self.pad)?,
            conv_out_dim(w, self.k, self.stride, self.pad)?,
        ))
    }

    pub fn forward<F: Scalar>(&self, p: &Params<F>, x: &Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(h, w).expect("input smaller than kernel");
        let ckk = self.cin * self.k * self.k;
        let hw = ho * wo;

        let weight = p.get(self.w);
        let weight = weight.as_slice().expect("weights contiguous");
        let bias = p.get(self.b);
        let bias = bias.as_slice().expect("bias contiguous");

        let mut out = Array4::<F>::zeros((n, self.cout, ho, wo));
        let mut cols = vec![F::zero(); ckk * hw];
        {
            let out_slice = out.as_slice_mut().expect("output contiguous");
            for ni in 0..n {
                im2col(&x.index_axis(ndarray::Axis(0), ni), self.k, self.stride, self.pad, ho, wo, &mut cols);
                let buf = &mut out_slice[ni * self.cout * hw..(ni + 1) * self.cout * hw];
                gemm_nn(self.cout, ckk, hw, F::one(), weight, &cols, F::zero(), buf);
                for (c, b) in bias.iter().enumerate() {
                    for v in &mut buf[c * hw..(c + 1) * hw] {
                        *v += *b;
                    }
                }
            }
        }
        (out, Conv2dCache { x: x.clone() })
    }

    /// Returns dx; accumulates dW/db into `grads` when provided.
    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &Conv2dCache<F>,
        dy: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let x = &cache.x;
        let (n, _, h, w) = x.dim();
        let (_, cout, ho, wo) = dy.dim();
        assert_eq!(cout, self.cout);
        let ckk = self.cin * self.k * self.k;
        let hw = ho * wo;

        let weight = p.get(self.w);
        let weight = weight.as_slice().expect("weights contiguous");
        let dy_all = dy.as_slice().expect("dy contiguous");

        let mut dx = Array4::<F>::zeros((n, self.cin, h, w));
        let mut dw = vec![F::zero(); self.cout * ckk];
        let mut db = vec![F::zero(); self.cout];
        let mut cols = vec![F::zero(); ckk * hw];
        let mut dcols = vec![F::zero(); ckk * hw];

        let want_param_grads = grads.is_some();
        for ni in 0..n {
            let dy_n = &dy_all[ni * self.cout * hw..(ni + 1) * self.cout * hw];

            // dcols = W^T * dy
            gemm_tn(ckk, self.cout, hw, F::one(), weight, dy_n, F::zero(), &mut dcols);
            col2im_strided(
                &dcols,
                self.k,
                self.stride,
                self.pad,
                ho,
                wo,
                hw,
                0,
                &mut dx.index_axis_mut(ndarray::Axis(0), ni),
            );

            if want_param_grads {
                im2col(&x.index_axis(ndarray::Axis(0), ni), self.k, self.stride, self.pad, ho, wo, &mut cols);
                // dW += dy * cols^T
                gemm_nt(self.cout, hw, ckk, F::one(), dy_n, &cols, F::one(), &mut dw);
                for c in 0..self.cout {
                    db[c] += dy_n[c * hw..(c + 1) * hw].iter().copied().sum::<F>();
                }
            }
        }

        if let Some(g) = grads.as_deref_mut() {
            g.accumulate(
                self.w,
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[self.cout, self.cin, self.k, self.k]), dw).unwrap(),
            );
            g.accumulate(self.b, Array1::from_vec(db).into_dyn());
        }
        dx
    }
}

/// Unrolls one sample `[c, h, w]` into `[c*k*k, ho*wo]` (row-major), zero
/// padding out-of-range taps.
pub fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [F],
) {
    im2col_strided(x, k, stride, pad, ho, wo, cols, ho * wo, 0);
}

/// [`im2col`] writing into a wider matrix: row `r` of this sample's block
/// lands at `cols[r * row_stride + col_offset ..]`, so several samples can
/// share one `[c*k*k, n*ho*wo]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col_strided<F: Scalar>(
    x: &ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [F],
    row_stride: usize,
    col_offset: usize,
) {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("activations are standard layout");
    let mut row = 0;
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * row_stride + col_offset..row * row_stride + col_offset + ho * wo];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 && pad <= kx {
                        // contiguous fast path: ix = ox + kx - pad is in range
                        // for ox < w - (kx - pad)
                        let shift = kx - pad;
                        let copy_len = (w - shift).min(wo);
                        dst_row[..copy_len].copy_from_slice(&src_row[shift..shift + copy_len]);
                        for v in &mut dst_row[copy_len..] {
                            *v = F::zero();
                        }
                        continue;
                    }
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col_strided`]: scatter-add columns back onto the
/// input grid.
#[allow(clippy::too_many_arguments)]
fn col2im_strided<F: Scalar>(
    cols: &[F],
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    row_stride: usize,
    col_offset: usize,
    dx: &mut ndarray::ArrayViewMut3<F>,
) {
    let (c, h, w) = dx.dim();
    let dxs = dx.as_slice_mut().expect("dx contiguous");
    let mut row = 0;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * row_stride + col_offset..row * row_stride + col_offset + ho * wo];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dxs[base + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Reference convolution used by tests: direct nested loops, no im2col.
pub fn conv2d_reference<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    b: &[F],
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, k, _) = w.dim();
    assert_eq!(cin, cin_w);
    let ho = conv_out_dim(h, k, stride, pad).unwrap();
    let wo = conv_out_dim(wd, k, stride, pad).unwrap();
    let mut out = Array4::<F>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[[ni, ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                    out[[ni, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (2, 1, 4), (1, 0, 1)] {
            let mut p = Params::<f64>::new();
            let conv = Conv2d::new(&mut p, &mut rng, "c", 3, 5, k, stride, pad);
            let x = Array::from_shape_fn((2, 3, 9, 8), |_| rng.random_range(-1.0..1.0));
            let (y, _) = conv.forward(&p, &x);
            let w = p.get(conv.w).into_dimensionality().unwrap();
            let b = p.get(conv.b);
            let y_ref = conv2d_reference(&x.view(), &w, b.as_slice().unwrap(), stride, pad);
            let max = (&y - &y_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-12, "stride={stride} pad={pad} k={k}: {max}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = Params::<f64>::new();
        let conv = Conv2d::new(&mut p, &mut rng, "c", 2, 3, 3, 1, 1);
        let x = Array::from_shape_fn((1, 2, 5, 5), |_| rng.random_range(-1.0..1.0));

        // loss = sum(y * m) for a fixed random mask m
        let (y, cache) = conv.forward(&p, &x);
        let m = Array::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let mut grads = Grads::new(&p);
        let dx = conv.backward(&p, &cache, &m, Some(&mut grads));

        let h = 1e-6;
        // input gradient
        for idx in [[0usize, 0, 0, 0], [0, 1, 2, 3], [0, 0, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fp = (conv.forward(&p, &xp).0 * &m).sum();
            let fm = (conv.forward(&p, &xm).0 * &m).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((dx[idx] - fd).abs() / fd.abs().max(1e-8) < 1e-5, "{:?}", idx);
        }
        // weight gradient
        let dw = grads.get(conv.w).unwrap();
        for idx in [[0usize, 0, 0, 0], [2, 1, 2, 2]] {
            let orig = p.get(conv.w)[ndarray::IxDyn(&idx)];
            let mut pp = p.clone();
            pp.get_mut(conv.w)[ndarray::IxDyn(&idx)] = orig + h;
            let fp = (conv.forward(&pp, &x).0 * &m).sum();
            pp.get_mut(conv.w)[ndarray::IxDyn(&idx)] = orig - h;
            let fm = (conv.forward(&pp, &x).0 * &m).sum();
            let fd = (fp - fm) / (2.0 * h);
            let got = dw[ndarray::IxDyn(&idx)];
            assert!((got - fd).abs() / fd.abs().max(1e-8) < 1e-5);
        }
    }
}
