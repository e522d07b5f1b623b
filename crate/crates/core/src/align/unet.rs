//! U-Net offset predictor: strided-conv encoder, bilinear-upsample decoder
//! with concatenation skips, LeakyReLU(0.2) activations, and a
//! zero-initialized offset head so training starts from plain-convolution
//! behavior.

use ndarray::{Array4, Axis};
use rand::Rng;

use crate::nn::{
    crop_hw, leaky_relu, leaky_relu_backward, reflect_pad_hw, reflect_pad_hw_backward, upsample2_bilinear,
    upsample2_bilinear_backward, zero_pad_grad_hw, Conv2d, Conv2dCache, Grads, Params, Scalar,
};

use super::{NUM_FRAMES, OFFSET_CHANNELS};

#[derive(Debug, Clone)]
pub struct OffsetUnet {
    pub levels: usize,
    pub base: usize,
    conv_in: Conv2d,
    downs: Vec<(Conv2d, Conv2d)>,
    ups: Vec<(Conv2d, Conv2d)>,
    head: Conv2d,
}

struct ConvAct<F> {
    cache: Conv2dCache<F>,
    preact: Array4<F>,
}

pub struct OffsetUnetCache<F> {
    in_dims: (usize, usize),
    padded_dims: (usize, usize),
    conv_in: ConvAct<F>,
    downs: Vec<(ConvAct<F>, ConvAct<F>)>,
    /// One entry per up step, deepest first.
    ups: Vec<UpStep<F>>,
    head: Conv2dCache<F>,
}

struct UpStep<F> {
    pre_upsample_dims: (usize, usize),
    a: ConvAct<F>,
    b: ConvAct<F>,
    skip_channels: usize,
}

impl OffsetUnet {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        name: &str,
        levels: usize,
        base: usize,
        head_kernel: usize,
    ) -> Self {
        assert!(levels >= 1, "U-Net needs at least one down step");
        let ch = |l: usize| base << l;
        let conv_in = Conv2d::new(params, rng, &format!("{name}.conv_in"), NUM_FRAMES, base, 3, 1, 1);
        let mut downs = Vec::new();
        for l in 1..=levels {
            let a = Conv2d::new(params, rng, &format!("{name}.down{l}.a"), ch(l - 1), ch(l), 3, 2, 1);
            let b = Conv2d::new(params, rng, &format!("{name}.down{l}.b"), ch(l), ch(l), 3, 1, 1);
            downs.push((a, b));
        }
        let mut ups = Vec::new();
        for l in (1..=levels).rev() {
            let a = Conv2d::new(params, rng, &format!("{name}.up{l}.a"), ch(l), ch(l - 1), 3, 1, 1);
            let b = Conv2d::new(params, rng, &format!("{name}.up{l}.b"), ch(l), ch(l - 1), 3, 1, 1);
            ups.push((a, b));
        }
        let head = Conv2d::new_zeros(
            params,
            &format!("{name}.head"),
            base,
            OFFSET_CHANNELS,
            head_kernel,
            1,
            head_kernel / 2,
        );
        OffsetUnet {
            levels,
            base,
            conv_in,
            downs,
            ups,
            head,
        }
    }

    /// Predict the 54-channel offset field at input resolution. Dimensions
    /// that do not divide `2^levels` are reflect-padded internally and the
    /// output is cropped back.
    pub fn forward<F: Scalar>(&self, p: &Params<F>, frames: &Array4<F>) -> (Array4<F>, OffsetUnetCache<F>) {
        let (_, c, h, w) = frames.dim();
        assert_eq!(c, NUM_FRAMES);
        let slope = F::from_f64(0.2);
        let multiple = 1usize << self.levels;
        let (xp, _) = reflect_pad_hw(frames, multiple);
        let padded_dims = (xp.dim().2, xp.dim().3);

        let run = |conv: &Conv2d, x: &Array4<F>| -> (Array4<F>, ConvAct<F>) {
            let (pre, cache) = conv.forward(p, x);
            let y = leaky_relu(&pre, slope);
            (y, ConvAct { cache, preact: pre })
        };

        let (x0, conv_in_ca) = run(&self.conv_in, &xp);
        let mut skips = vec![x0];
        let mut downs_cache = Vec::new();
        for (a, b) in &self.downs {
            let (ya, ca) = run(a, skips.last().unwrap());
            let (yb, cb) = run(b, &ya);
            downs_cache.push((ca, cb));
            skips.push(yb);
        }

        let mut cur = skips.pop().unwrap();
        let mut ups_cache = Vec::new();
        for (step, (a, b)) in self.ups.iter().enumerate() {
            let skip = skips.pop().unwrap();
            let pre_dims = (cur.dim().2, cur.dim().3);
            let up = upsample2_bilinear(&cur);
            let (t, ca) = run(a, &up);
            let cat = concat_channels(&t, &skip);
            let (next, cb) = run(b, &cat);
            ups_cache.push(UpStep {
                pre_upsample_dims: pre_dims,
                a: ca,
                b: cb,
                skip_channels: skip.dim().1,
            });
            cur = next;
            let _ = step;
        }

        let (off_padded, head_cache) = self.head.forward(p, &cur);
        let offsets = crop_hw(&off_padded, h, w);
        (
            offsets,
            OffsetUnetCache {
                in_dims: (h, w),
                padded_dims,
                conv_in: conv_in_ca,
                downs: downs_cache,
                ups: ups_cache,
                head: head_cache,
            },
        )
    }

    /// Backward from offset gradients to frame gradients.
    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &OffsetUnetCache<F>,
        d_offsets: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let slope = F::from_f64(0.2);
        let (ph, pw) = cache.padded_dims;
        let d_off_padded = zero_pad_grad_hw(d_offsets, ph, pw);
        let mut d_cur = self.head.backward(p, &cache.head, &d_off_padded, grads.as_deref_mut());

        // up steps were applied deepest-first; unwind shallowest-first
        let mut skip_grads: Vec<Option<Array4<F>>> = vec![None; self.ups.len()];
        for (step, (a, b)) in self.ups.iter().enumerate().rev() {
            let sc = &cache.ups[step];
            let d_pre_b = leaky_relu_backward(&sc.b.preact, &d_cur, slope);
            let d_cat = b.backward(p, &sc.b.cache, &d_pre_b, grads.as_deref_mut());
            let t_channels = d_cat.dim().1 - sc.skip_channels;
            let d_t = d_cat.slice(ndarray::s![.., ..t_channels, .., ..]).to_owned();
            let d_skip = d_cat.slice(ndarray::s![.., t_channels.., .., ..]).to_owned();
            skip_grads[step] = Some(d_skip);

            let d_pre_a = leaky_relu_backward(&sc.a.preact, &d_t, slope);
            let d_up = a.backward(p, &sc.a.cache, &d_pre_a, grads.as_deref_mut());
            d_cur = upsample2_bilinear_backward(&d_up, sc.pre_upsample_dims.0, sc.pre_upsample_dims.1);
        }

        // walk the encoder back down; skip_grads[step] pairs with the level
        // whose output fed that up step's concat
        for (l, (a, b)) in self.downs.iter().enumerate().rev() {
            // down level l+1 output feeds up step (levels-1-l)'s input chain;
            // its concat skip is skips[l], consumed by up step levels-1-l
            let sc = &cache.downs[l];
            let d_pre_b = leaky_relu_backward(&sc.1.preact, &d_cur, slope);
            let d_mid = b.backward(p, &sc.1.cache, &d_pre_b, grads.as_deref_mut());
            let d_pre_a = leaky_relu_backward(&sc.0.preact, &d_mid, slope);
            let mut d_below = a.backward(p, &sc.0.cache, &d_pre_a, grads.as_deref_mut());
            // add the skip gradient feeding this level's input
            let up_step = self.levels - 1 - l;
            if let Some(sg) = skip_grads[up_step].take() {
                d_below += &sg;
            }
            d_cur = d_below;
        }

        let d_pre_in = leaky_relu_backward(&cache.conv_in.preact, &d_cur, slope);
        let d_xp = self.conv_in.backward(p, &cache.conv_in.cache, &d_pre_in, grads);
        reflect_pad_hw_backward(&d_xp, cache.in_dims.0, cache.in_dims.1)
    }
}

/// Channel concatenation with a standard-layout result.
pub(crate) fn concat_channels<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let cat = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap();
    if cat.is_standard_layout() {
        cat
    } else {
        cat.as_standard_layout().to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_unet(levels: usize, base: usize) -> (Params<f64>, OffsetUnet) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut p = Params::<f64>::new();
        let unet = OffsetUnet::new(&mut p, &mut rng, "unet", levels, base, 3);
        (p, unet)
    }

    #[test]
    fn freshly_initialized_head_predicts_zero_offsets() {
        let (p, unet) = small_unet(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::from_shape_fn((1, 3, 8, 8), |_| rng.random_range(0.0..1.0));
        let (off, _) = unet.forward(&p, &x);
        assert_eq!(off.dim(), (1, OFFSET_CHANNELS, 8, 8));
        assert!(off.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_has_54_channels_at_any_input_size() {
        let (p, unet) = small_unet(2, 4);
        for (h, w) in [(8usize, 8usize), (9, 13), (16, 10)] {
            let x = Array4::<f64>::from_elem((1, 3, h, w), 0.3);
            let (off, _) = unet.forward(&p, &x);
            assert_eq!(off.dim(), (1, OFFSET_CHANNELS, h, w), "at {h}x{w}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (p, unet) = small_unet(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array::from_shape_fn((2, 3, 12, 12), |_| rng.random_range(0.0..1.0));
        let (a, _) = unet.forward(&p, &x);
        let (b, _) = unet.forward(&p, &x);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences_through_the_net() {
        let (mut p, unet) = small_unet(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // head must be nonzero for gradients to flow
        {
            let head_w = p.find("unet.head.weight").unwrap();
            let mut wv = p.get_mut(head_w);
            for v in wv.iter_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        let x = Array::from_shape_fn((1, 3, 6, 6), |_| rng.random_range(0.0..1.0));
        let mask = Array::from_shape_fn((1, OFFSET_CHANNELS, 6, 6), |_| rng.random_range(-1.0..1.0));

        let loss = |p: &Params<f64>, xx: &Array4<f64>| (unet.forward(p, xx).0 * &mask).sum();
        let (_, cache) = unet.forward(&p, &x);
        let dx = unet.backward(&p, &cache, &mask, None);

        let h = 1e-6;
        for idx in [[0usize, 0, 0, 0], [0, 1, 3, 2], [0, 2, 5, 5]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            if fd.abs() > 1e-7 {
                let rel = (dx[idx] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-3, "{idx:?}: got {} fd {fd}", dx[idx]);
            }
        }

        // parameter gradient spot check via a conv deep in the net
        let wid = p.find("unet.down1.a.weight").unwrap();
        let (_, cache) = unet.forward(&p, &x);
        let mut grads = Grads::new(&p);
        unet.backward(&p, &cache, &mask, Some(&mut grads));
        let got = grads.get(wid).unwrap()[ndarray::IxDyn(&[0, 0, 1, 1])];
        let orig = p.get(wid)[ndarray::IxDyn(&[0, 0, 1, 1])];
        p.get_mut(wid)[ndarray::IxDyn(&[0, 0, 1, 1])] = orig + h;
        let fp = loss(&p, &x);
        p.get_mut(wid)[ndarray::IxDyn(&[0, 0, 1, 1])] = orig - h;
        let fm = loss(&p, &x);
        let fd = (fp - fm) / (2.0 * h);
        let rel = (got - fd).abs() / fd.abs().max(1e-6);
        assert!(rel < 1e-3, "param grad: got {got} fd {fd}");
    }
}
