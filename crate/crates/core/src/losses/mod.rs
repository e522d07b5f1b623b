//! Training objectives: least-squares adversarial loss, perceptual
//! feature distance, discriminator feature matching, and their unweighted
//! sum for the generator.

mod extractor;

pub use extractor::{ExtractorCache, FeatureExtractor};

use ndarray::Array4;

use crate::discriminator::{FeatureStack, PatchScoreMap};
use crate::error::{Error, Result};
use crate::nn::{Params, Scalar};

/// Per-step scalar report. `total_g` is the unweighted sum of the three
/// generator terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_gan_g: f64,
    pub l_gan_d: f64,
    pub l_vgg: f64,
    pub l_fm: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_gan_g.is_finite()
            && self.l_gan_d.is_finite()
            && self.l_vgg.is_finite()
            && self.l_fm.is_finite()
            && self.total_g.is_finite()
    }
}

/// Discriminator objective: real patches target 1, generated patches
/// target 0, squared error averaged over patches.
pub fn gan_loss_d<F: Scalar>(real: &PatchScoreMap<F>, fake: &PatchScoreMap<F>) -> F {
    let one = F::one();
    let mr = mean_of(&real.scores, |v| (v - one) * (v - one));
    let mf = mean_of(&fake.scores, |v| v * v);
    mr + mf
}

/// Gradients of [`gan_loss_d`] w.r.t. the raw real and fake scores.
pub fn gan_loss_d_backward<F: Scalar>(real: &PatchScoreMap<F>, fake: &PatchScoreMap<F>) -> (Array4<F>, Array4<F>) {
    let two = F::from_f64(2.0);
    let nr = F::from_f64(real.scores.len() as f64);
    let nf = F::from_f64(fake.scores.len() as f64);
    let one = F::one();
    (
        real.scores.mapv(|v| two * (v - one) / nr),
        fake.scores.mapv(|v| two * v / nf),
    )
}

/// Generator adversarial objective: generated patches target 1.
pub fn gan_loss_g<F: Scalar>(fake: &PatchScoreMap<F>) -> F {
    let one = F::one();
    mean_of(&fake.scores, |v| (v - one) * (v - one))
}

pub fn gan_loss_g_backward<F: Scalar>(fake: &PatchScoreMap<F>) -> Array4<F> {
    let two = F::from_f64(2.0);
    let n = F::from_f64(fake.scores.len() as f64);
    let one = F::one();
    fake.scores.mapv(|v| two * (v - one) / n)
}

/// Layer-normalized L1 distance between two feature lists:
/// `(1/N) sum_n sum_i (1/M_i) sum_j |a_ij - b_ij|` where `M_i` counts all
/// elements (channel x spatial) of layer `i` per sample.
pub fn feature_l1<F: Scalar>(a: &[Array4<F>], b: &[Array4<F>]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "feature stacks differ in depth: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = F::zero();
    for (fa, fb) in a.iter().zip(b) {
        if fa.dim() != fb.dim() {
            return Err(Error::shape(format!(
                "feature shapes differ: {:?} vs {:?}",
                fa.dim(),
                fb.dim()
            )));
        }
        let (n, c, h, w) = fa.dim();
        let m = F::from_f64((c * h * w) as f64 * n as f64);
        let sum = fa
            .iter()
            .zip(fb.iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<F>();
        total += sum / m;
    }
    Ok(total)
}

/// Gradient of [`feature_l1`] w.r.t. `b` (the generated branch); `a` is
/// treated as constant.
pub fn feature_l1_backward<F: Scalar>(a: &[Array4<F>], b: &[Array4<F>]) -> Vec<Array4<F>> {
    a.iter()
        .zip(b)
        .map(|(fa, fb)| {
            let (n, c, h, w) = fa.dim();
            let m = F::from_f64((c * h * w) as f64 * n as f64);
            let mut g = Array4::<F>::zeros(fa.dim());
            ndarray::Zip::from(&mut g).and(fa).and(fb).for_each(|o, &x, &y| {
                *o = if y > x {
                    F::one() / m
                } else if y < x {
                    -F::one() / m
                } else {
                    F::zero()
                };
            });
            g
        })
        .collect()
}

/// Perceptual loss: layer-normalized L1 over extractor features of the
/// target and the enhanced frame.
pub fn vgg_loss<F: Scalar>(
    extractor: &FeatureExtractor,
    p: &Params<F>,
    x: &Array4<F>,
    x_hat: &Array4<F>,
) -> Result<F> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape("perceptual loss needs equal frame dimensions"));
    }
    let (fx, _) = extractor.forward_taps(p, x)?;
    let (fh, _) = extractor.forward_taps(p, x_hat)?;
    feature_l1(&fx, &fh)
}

/// [`vgg_loss`] plus its gradient w.r.t. `x_hat`.
pub fn vgg_loss_with_grad<F: Scalar>(
    extractor: &FeatureExtractor,
    p: &Params<F>,
    x: &Array4<F>,
    x_hat: &Array4<F>,
) -> Result<(F, Array4<F>)> {
    let (fx, _) = extractor.forward_taps(p, x)?;
    let (fh, cache) = extractor.forward_taps(p, x_hat)?;
    let value = feature_l1(&fx, &fh)?;
    let d_taps = feature_l1_backward(&fx, &fh);
    let dx_hat = extractor.backward_to_input(p, &cache, &d_taps);
    Ok((value, dx_hat))
}

/// Feature-matching loss over discriminator features; the real branch is
/// treated as constant.
pub fn fm_loss<F: Scalar>(real: &FeatureStack<F>, fake: &FeatureStack<F>) -> Result<F> {
    feature_l1(&real.layers, &fake.layers)
}

/// Gradients of [`fm_loss`] w.r.t. the fake feature stack.
pub fn fm_loss_backward<F: Scalar>(real: &FeatureStack<F>, fake: &FeatureStack<F>) -> Vec<Array4<F>> {
    feature_l1_backward(&real.layers, &fake.layers)
}

/// Unweighted sum of the generator terms; rejects non-finite inputs.
pub fn total_g_loss(l_gan_g: f64, l_vgg: f64, l_fm: f64) -> Result<f64> {
    for (term, v) in [("l_gan_g", l_gan_g), ("l_vgg", l_vgg), ("l_fm", l_fm)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: term.into() });
        }
    }
    Ok(l_gan_g + l_vgg + l_fm)
}

fn mean_of<F: Scalar>(scores: &Array4<F>, f: impl Fn(F) -> F) -> F {
    scores.iter().map(|&v| f(v)).sum::<F>() / F::from_f64(scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExtractorConfig;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_of(vals: Array4<f64>) -> PatchScoreMap<f64> {
        PatchScoreMap::new(vals)
    }

    #[test]
    fn perfect_discriminator_has_zero_loss() {
        let real = map_of(Array4::from_elem((1, 1, 3, 3), 1.0));
        let fake = map_of(Array4::from_elem((1, 1, 3, 3), 0.0));
        assert_eq!(gan_loss_d(&real, &fake), 0.0);
    }

    #[test]
    fn inverted_discriminator_scores_two() {
        let real = map_of(Array4::from_elem((1, 1, 2, 2), 0.0));
        let fake = map_of(Array4::from_elem((1, 1, 2, 2), 1.0));
        assert!((gan_loss_d(&real, &fake) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn undecided_discriminator_scores_half() {
        let real = map_of(Array4::from_elem((1, 1, 2, 2), 0.5));
        let fake = map_of(Array4::from_elem((1, 1, 2, 2), 0.5));
        assert!((gan_loss_d(&real, &fake) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_examples() {
        assert_eq!(gan_loss_g(&map_of(Array4::from_elem((1, 1, 2, 2), 1.0))), 0.0);
        assert!((gan_loss_g(&map_of(Array4::from_elem((1, 1, 2, 2), 0.0))) - 1.0).abs() < 1e-12);
        assert!((gan_loss_g(&map_of(Array4::from_elem((1, 1, 2, 2), 0.5))) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores = Array::from_shape_fn((1, 1, 3, 3), |_| rng.random_range(-1.0..2.0));
        let fake = map_of(scores.clone());
        let g = gan_loss_g_backward(&fake);
        let h = 1e-6;
        for idx in [[0usize, 0, 0, 0], [0, 0, 2, 1]] {
            let mut sp = scores.clone();
            sp[idx] += h;
            let mut sm = scores.clone();
            sm[idx] -= h;
            let fd = (gan_loss_g(&map_of(sp)) - gan_loss_g(&map_of(sm))) / (2.0 * h);
            assert!((g[idx] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_features_give_mean_absolute_pixel_difference() {
        // single identity layer: loss reduces to (1/HW) sum |x - y|
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_fn((1, 1, 4, 4), |_| rng.random_range(0.0f64..1.0));
        let y = Array::from_shape_fn((1, 1, 4, 4), |_| rng.random_range(0.0..1.0));
        let got = feature_l1(&[x.clone()], &[y.clone()]).unwrap();
        let want = (&x - &y).iter().map(|v| v.abs()).sum::<f64>() / 16.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_in_one_layer_costs_its_magnitude() {
        let a = Array4::from_elem((1, 2, 3, 3), 0.2f64);
        let b = a.mapv(|v| v + 0.37);
        let got = feature_l1(&[a], &[b]).unwrap();
        assert!((got - 0.37).abs() < 1e-9, "normalization must cancel the element count");
    }

    #[test]
    fn feature_losses_are_pseudometrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-1.0f64..1.0));
        let b = Array::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-1.0..1.0));
        assert_eq!(feature_l1(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let ab = feature_l1(&[a.clone()], &[b.clone()]).unwrap();
        let ba = feature_l1(&[b], &[a]).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_mirrors_feature_l1_and_detaches_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let real = FeatureStack {
            layers: vec![Array::from_shape_fn((1, 2, 3, 3), |_| rng.random_range(-1.0..1.0))],
        };
        let fake = FeatureStack {
            layers: vec![Array::from_shape_fn((1, 2, 3, 3), |_| rng.random_range(-1.0..1.0))],
        };
        assert_eq!(fm_loss(&real, &real).unwrap(), 0.0);
        let g = fm_loss_backward(&real, &fake);
        assert_eq!(g.len(), 1);
        // gradient signs follow fake - real
        for (idx, v) in g[0].indexed_iter() {
            let d = fake.layers[0][idx] - real.layers[0][idx];
            if d > 0.0 {
                assert!(*v > 0.0);
            } else if d < 0.0 {
                assert!(*v < 0.0);
            }
        }
    }

    #[test]
    fn mismatched_stacks_are_rejected() {
        let a = FeatureStack {
            layers: vec![Array4::<f64>::zeros((1, 2, 3, 3))],
        };
        let b = FeatureStack {
            layers: vec![Array4::<f64>::zeros((1, 2, 4, 3))],
        };
        assert!(matches!(fm_loss(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_adds_and_guards() {
        assert_eq!(total_g_loss(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_g_loss(0.25, 1.0, 0.5).unwrap(), 1.75);
        assert!(matches!(
            total_g_loss(f64::NAN, 0.0, 0.0),
            Err(Error::NonFiniteLoss { .. })
        ));
        assert!(matches!(
            total_g_loss(0.0, f64::INFINITY, 0.0),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn vgg_loss_is_zero_on_identical_frames_and_positive_otherwise() {
        let mut p = Params::<f32>::new();
        let cfg = ExtractorConfig {
            base: 4,
            ..ExtractorConfig::desk()
        };
        let e = FeatureExtractor::new(&mut p, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array::from_shape_fn((1, 1, 16, 16), |_| rng.random_range(0.0f32..1.0));
        let y = Array::from_shape_fn((1, 1, 16, 16), |_| rng.random_range(0.0f32..1.0));
        assert_eq!(vgg_loss(&e, &p, &x, &x).unwrap(), 0.0);
        assert!(vgg_loss(&e, &p, &x, &y).unwrap() > 0.0);
    }

    #[test]
    fn lsgan_fixed_point_is_half_with_quarter_generator_loss() {
        // when the generated and data distributions coincide, a constant-
        // output discriminator c minimizes (c-1)^2 + c^2; brute-force the
        // optimum and evaluate the generator loss there
        let mut best_c = f64::NAN;
        let mut best = f64::INFINITY;
        for i in 0..=10_000 {
            let c = -2.0 + 4.0 * i as f64 / 10_000.0;
            let real = map_of(Array4::from_elem((1, 1, 1, 1), c));
            let fake = map_of(Array4::from_elem((1, 1, 1, 1), c));
            let v = gan_loss_d(&real, &fake);
            if v < best {
                best = v;
                best_c = c;
            }
        }
        assert!((best_c - 0.5).abs() < 1e-3, "optimal constant D is {best_c}");
        let g = gan_loss_g(&map_of(Array4::from_elem((1, 1, 1, 1), best_c)));
        assert!((g - 0.25).abs() < 1e-3);
    }

    #[test]
    fn vgg_gradient_matches_finite_differences() {
        let mut p = Params::<f64>::new();
        let cfg = ExtractorConfig {
            base: 2,
            layer_ids: vec![0, 2],
            seed: 11,
        };
        let e = FeatureExtractor::new(&mut p, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(0.1..0.9));
        let xh = Array::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(0.1..0.9));
        let (_, g) = vgg_loss_with_grad(&e, &p, &x, &xh).unwrap();
        let h = 1e-6;
        for idx in [[0usize, 0, 1, 1], [0, 0, 5, 6]] {
            let mut ap = xh.clone();
            ap[idx] += h;
            let mut am = xh.clone();
            am[idx] -= h;
            let fd = (vgg_loss(&e, &p, &x, &ap).unwrap() - vgg_loss(&e, &p, &x, &am).unwrap()) / (2.0 * h);
            if fd.abs() > 1e-9 {
                let rel = (g[idx] - fd).abs() / fd.abs().max(1e-9);
                assert!(rel < 1e-3, "{idx:?}: got {} fd {fd}", g[idx]);
            }
        }
    }
}
