//! Fixed 19-layer feature extractor behind the perceptual loss: sixteen
//! 3x3 convolutions in five stages (64/128/256/512/512 at full width) with
//! ReLU activations and 2x2 max pooling between stages. Weights either come
//! from a converted pretrained file or, for offline runs, from a seeded
//! random initialization; the loss identities (zero on equal inputs,
//! nonnegativity, symmetry) hold for any weights.
//!
//! Luminance input is replicated to three channels and normalized with the
//! published channel statistics before the first convolution.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExtractorConfig;
use crate::error::{Error, Result};
use crate::nn::{max_pool2, max_pool2_backward, relu, relu_backward, Conv2d, Conv2dCache, Params, Scalar};

/// Convs per stage of the 19-layer plan.
const STAGE_CONVS: [usize; 5] = [2, 2, 4, 4, 4];
/// Channel multiplier per stage relative to `cfg.base`.
const STAGE_WIDTH: [usize; 5] = [1, 2, 4, 8, 8];

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub cfg: ExtractorConfig,
    convs: Vec<Conv2d>,
    /// stage index of each conv layer
    stage: Vec<usize>,
}

enum Step<F> {
    Conv { idx: usize, cache: Conv2dCache<F>, preact: Array4<F> },
    Pool { arg: ndarray::Array4<usize>, in_h: usize, in_w: usize },
}

pub struct ExtractorCache<F> {
    steps: Vec<Step<F>>,
    /// positions in `steps` right after which a tap was taken
    tap_steps: Vec<usize>,
    norm_in_dims: (usize, usize, usize, usize),
}

impl FeatureExtractor {
    /// Seeded random weights (documented fallback when no weight file is
    /// supplied).
    pub fn new<F: Scalar>(params: &mut Params<F>, cfg: &ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut convs = Vec::new();
        let mut stage = Vec::new();
        let mut cin = 3usize;
        let mut idx = 0usize;
        for (s, (&count, &width)) in STAGE_CONVS.iter().zip(STAGE_WIDTH.iter()).enumerate() {
            let cout = cfg.base * width;
            for _ in 0..count {
                convs.push(Conv2d::new(
                    params,
                    &mut rng,
                    &format!("extractor.conv{idx}"),
                    cin,
                    cout,
                    3,
                    1,
                    1,
                ));
                stage.push(s);
                cin = cout;
                idx += 1;
            }
        }
        Ok(FeatureExtractor {
            cfg: cfg.clone(),
            convs,
            stage,
        })
    }

    pub fn num_taps(&self) -> usize {
        self.cfg.layer_ids.len()
    }

    /// Minimum input side so every tapped stage still has spatial extent.
    pub fn min_input(&self) -> usize {
        let last_stage = self.stage[*self.cfg.layer_ids.last().unwrap()];
        1 << last_stage
    }

    /// Replicate luminance to 3 channels and apply channel normalization.
    fn normalize<F: Scalar>(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, 1, "extractor expects single-channel luminance");
        let mut out = Array4::<F>::zeros((n, 3, h, w));
        for ci in 0..3 {
            let mean = F::from_f64(MEAN[ci]);
            let std = F::from_f64(STD[ci]);
            let src = x.slice(ndarray::s![.., 0, .., ..]);
            let mut dst = out.slice_mut(ndarray::s![.., ci, .., ..]);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|o, &v| {
                *o = (v - mean) / std;
            });
        }
        out
    }

    /// Tapped post-ReLU features in `layer_ids` order.
    pub fn forward_taps<F: Scalar>(
        &self,
        p: &Params<F>,
        x: &Array4<F>,
    ) -> Result<(Vec<Array4<F>>, ExtractorCache<F>)> {
        let (_, _, h, w) = x.dim();
        let min = self.min_input();
        if h < min || w < min {
            return Err(Error::InputTooSmall { height: h, width: w, min });
        }
        let last = *self.cfg.layer_ids.last().unwrap();
        let norm = self.normalize(x);
        let norm_in_dims = x.dim();

        let mut cur = norm;
        let mut steps = Vec::new();
        let mut taps = Vec::new();
        let mut tap_steps = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 && self.stage[i] != self.stage[i - 1] {
                let (pooled, arg) = max_pool2(&cur);
                steps.push(Step::Pool {
                    arg,
                    in_h: cur.dim().2,
                    in_w: cur.dim().3,
                });
                cur = pooled;
            }
            let (pre, cache) = conv.forward(p, &cur);
            let act = relu(&pre);
            steps.push(Step::Conv {
                idx: i,
                cache,
                preact: pre,
            });
            cur = act;
            if self.cfg.layer_ids.contains(&i) {
                taps.push(cur.clone());
                tap_steps.push(steps.len() - 1);
            }
            if i == last {
                break;
            }
        }
        Ok((
            taps,
            ExtractorCache {
                steps,
                tap_steps,
                norm_in_dims,
            },
        ))
    }

    /// Backward from tap gradients to the luminance input. The extractor
    /// is frozen: no parameter gradients are produced.
    pub fn backward_to_input<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &ExtractorCache<F>,
        d_taps: &[Array4<F>],
    ) -> Array4<F> {
        assert_eq!(d_taps.len(), cache.tap_steps.len());
        let mut d_cur: Option<Array4<F>> = None;
        for (si, step) in cache.steps.iter().enumerate().rev() {
            if let Some(pos) = cache.tap_steps.iter().position(|&t| t == si) {
                let inject = &d_taps[pos];
                d_cur = Some(match d_cur {
                    Some(d) => d + inject,
                    None => inject.clone(),
                });
            }
            let d = match d_cur.take() {
                Some(d) => d,
                None => continue,
            };
            let next = match step {
                Step::Conv { idx, cache, preact } => {
                    let d_pre = relu_backward(preact, &d);
                    self.convs[*idx].backward(p, cache, &d_pre, None)
                }
                Step::Pool { arg, in_h, in_w } => max_pool2_backward(&d, arg, *in_h, *in_w),
            };
            d_cur = Some(next);
        }
        let d_norm = d_cur.expect("at least one tap gradient");
        // transpose of replicate + normalize: sum channels, divide by std
        let (n, _, h, w) = cache.norm_in_dims;
        let mut dx = Array4::<F>::zeros((n, 1, h, w));
        for ci in 0..3 {
            let std = F::from_f64(STD[ci]);
            let src = d_norm.slice(ndarray::s![.., ci, .., ..]);
            let mut dst = dx.slice_mut(ndarray::s![.., 0, .., ..]);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|o, &v| {
                *o += v / std;
            });
        }
        dx
    }

    /// Replace the seeded weights with tensors from a weight container
    /// (names `extractor.conv{i}.weight` / `.bias`).
    pub fn load_weights<F: Scalar>(&self, params: &mut Params<F>, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for (name, shape, data) in tensors {
            let Some(id) = params.find(name) else {
                return Err(Error::Checkpoint(format!("unknown extractor tensor {name}")));
            };
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: file {:?}, model {:?}",
                    shape,
                    params.get(id).shape()
                )));
            }
            let arr = ndarray::ArrayD::from_shape_vec(
                ndarray::IxDyn(shape),
                data.iter().map(|&v| F::from_f64(v as f64)).collect(),
            )
            .unwrap();
            params.set(id, arr);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_extractor() -> (Params<f32>, FeatureExtractor) {
        let mut p = Params::<f32>::new();
        let cfg = ExtractorConfig {
            base: 4,
            ..ExtractorConfig::desk()
        };
        let e = FeatureExtractor::new(&mut p, &cfg).unwrap();
        (p, e)
    }

    #[test]
    fn taps_have_expected_count_and_shrinking_resolution() {
        let (p, e) = desk_extractor();
        let x = Array4::<f32>::from_elem((1, 1, 32, 32), 0.4);
        let (taps, _) = e.forward_taps(&p, &x).unwrap();
        assert_eq!(taps.len(), 5);
        assert_eq!(taps[0].dim().2, 32);
        assert_eq!(taps[4].dim().2, 2);
    }

    #[test]
    fn too_small_input_rejected() {
        let (p, e) = desk_extractor();
        let x = Array4::<f32>::from_elem((1, 1, 8, 8), 0.4);
        assert!(matches!(e.forward_taps(&p, &x), Err(Error::InputTooSmall { .. })));
    }

    #[test]
    fn deterministic_given_seed() {
        let (p1, e1) = desk_extractor();
        let (p2, e2) = desk_extractor();
        let x = Array4::<f32>::from_elem((1, 1, 16, 16), 0.6);
        let (a, _) = e1.forward_taps(&p1, &x).unwrap();
        let (b, _) = e2.forward_taps(&p2, &x).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = Params::<f64>::new();
        let cfg = ExtractorConfig {
            base: 2,
            layer_ids: vec![1, 3],
            seed: 7,
        };
        let e = FeatureExtractor::new(&mut p, &cfg).unwrap();
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ndarray::Array::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(0.1..0.9));
        let masks: Vec<Array4<f64>> = {
            let (taps, _) = e.forward_taps(&p, &x).unwrap();
            taps.iter()
                .map(|t| ndarray::Array::from_shape_fn(t.dim(), |_| rng.random_range(-1.0..1.0)))
                .collect()
        };
        let loss = |xx: &Array4<f64>| {
            let (taps, _) = e.forward_taps(&p, xx).unwrap();
            taps.iter().zip(&masks).map(|(t, m)| (t * m).sum()).sum::<f64>()
        };
        let (_, cache) = e.forward_taps(&p, &x).unwrap();
        let dx = e.backward_to_input(&p, &cache, &masks);
        let h = 1e-6;
        for idx in [[0usize, 0, 0, 0], [0, 0, 3, 5], [0, 0, 7, 7]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            if fd.abs() > 1e-8 {
                let rel = (dx[idx] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-3, "{idx:?}: got {} fd {fd}", dx[idx]);
            }
        }
    }
}
