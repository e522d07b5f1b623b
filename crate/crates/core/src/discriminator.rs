//! Fully convolutional patch discriminator: 4 stride-2/stride-1 conv
//! layers (LeakyReLU 0.2, instance norm after the first), a 1-channel
//! head of raw patch scores, and feature taps after every activation for
//! the feature-matching objective. Raw scores, no squashing: the
//! adversarial objective is least-squares.

use ndarray::Array4;
use rand::Rng;

use crate::config::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::nn::{
    conv_out_dim, leaky_relu, leaky_relu_backward, Conv2d, Conv2dCache, Grads, InstanceNorm2d,
    InstanceNorm2dCache, Params, Scalar,
};

/// Number of feature taps exposed for feature matching.
pub const NUM_FEATURE_LAYERS: usize = 4;
/// Smallest input that still yields a 1x1 score map.
pub const MIN_INPUT: usize = 24;

/// Raw per-patch scores and their arithmetic mean.
#[derive(Debug, Clone)]
pub struct PatchScoreMap<F> {
    pub scores: Array4<F>,
    pub mean: F,
}

impl<F: Scalar> PatchScoreMap<F> {
    pub fn new(scores: Array4<F>) -> Self {
        let mean = scores.iter().copied().sum::<F>() / F::from_f64(scores.len() as f64);
        PatchScoreMap { scores, mean }
    }

    pub fn num_patches(&self) -> usize {
        self.scores.len()
    }
}

/// Ordered post-activation features, one per tapped layer.
#[derive(Debug, Clone)]
pub struct FeatureStack<F> {
    pub layers: Vec<Array4<F>>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    norms: Vec<InstanceNorm2d>,
    head: Conv2d,
}

pub struct DiscriminatorCache<F> {
    convs: Vec<Conv2dCache<F>>,
    norms: Vec<Option<InstanceNorm2dCache<F>>>,
    preacts: Vec<Array4<F>>,
    head: Conv2dCache<F>,
}

impl Discriminator {
    pub fn new<F: Scalar, R: Rng>(params: &mut Params<F>, rng: &mut R, cfg: &DiscriminatorConfig) -> Self {
        let b = cfg.base;
        let plan = [(1usize, b, 2usize), (b, 2 * b, 2), (2 * b, 4 * b, 2), (4 * b, 8 * b, 1)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                Conv2d::new_normal(params, rng, &format!("discriminator.l{i}"), cin, cout, 4, stride, 1)
            })
            .collect();
        let norms = (1..4).map(|i| InstanceNorm2d::new(plan[i].1)).collect();
        let head = Conv2d::new_normal(params, rng, "discriminator.head", 8 * b, 1, 4, 1, 1);
        Discriminator {
            cfg: cfg.clone(),
            convs,
            norms,
            head,
        }
    }

    /// Spatial dims of the score map for an input, or an error when the
    /// input is below the receptive field.
    pub fn score_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let mut dh = h;
        let mut dw = w;
        let strides = [2usize, 2, 2, 1, 1];
        for s in strides {
            let oh = conv_out_dim(dh, 4, s, 1).unwrap_or(0);
            let ow = conv_out_dim(dw, 4, s, 1).unwrap_or(0);
            if oh == 0 || ow == 0 {
                return Err(Error::InputTooSmall {
                    height: h,
                    width: w,
                    min: MIN_INPUT,
                });
            }
            dh = oh;
            dw = ow;
        }
        Ok((dh, dw))
    }

    /// Shared forward pass: patch scores plus the four feature taps.
    pub fn forward<F: Scalar>(
        &self,
        p: &Params<F>,
        x: &Array4<F>,
    ) -> Result<(PatchScoreMap<F>, FeatureStack<F>, DiscriminatorCache<F>)> {
        let (_, c, h, w) = x.dim();
        if c != 1 {
            return Err(Error::shape("discriminator expects single-channel frames"));
        }
        self.score_dims(h, w)?;
        let slope = F::from_f64(0.2);

        let mut cur = x.clone();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut preacts = Vec::new();
        let mut feats = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let (h, ccache) = conv.forward(p, &cur);
            convs.push(ccache);
            let pre = if i == 0 {
                norms.push(None);
                h
            } else {
                let (n, ncache) = self.norms[i - 1].forward(&h);
                norms.push(Some(ncache));
                n
            };
            let act = leaky_relu(&pre, slope);
            preacts.push(pre);
            feats.push(act.clone());
            cur = act;
        }
        let (scores, head) = self.head.forward(p, &cur);
        Ok((
            PatchScoreMap::new(scores),
            FeatureStack { layers: feats },
            DiscriminatorCache {
                convs,
                norms,
                preacts,
                head,
            },
        ))
    }

    /// Backward from score gradients plus optional gradients injected at
    /// each feature tap (for feature matching). Returns dx.
    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &DiscriminatorCache<F>,
        d_scores: &Array4<F>,
        d_feats: Option<&[Array4<F>]>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let slope = F::from_f64(0.2);
        let mut d_cur = self.head.backward(p, &cache.head, d_scores, grads.as_deref_mut());
        for i in (0..self.convs.len()).rev() {
            if let Some(df) = d_feats {
                d_cur += &df[i];
            }
            let d_pre = leaky_relu_backward(&cache.preacts[i], &d_cur, slope);
            let d_conv_out = match &cache.norms[i] {
                Some(ncache) => self.norms[i - 1].backward(ncache, &d_pre),
                None => d_pre,
            };
            d_cur = self.convs[i].backward(p, &cache.convs[i], &d_conv_out, grads.as_deref_mut());
        }
        d_cur
    }

    /// Per-patch real/fake scores averaged into one decision.
    pub fn discriminate<F: Scalar>(&self, p: &Params<F>, frame: &Array4<F>) -> Result<PatchScoreMap<F>> {
        Ok(self.forward(p, frame)?.0)
    }

    /// Post-activation features of the four conv layers, in order.
    pub fn extract_features<F: Scalar>(&self, p: &Params<F>, frame: &Array4<F>) -> Result<FeatureStack<F>> {
        Ok(self.forward(p, frame)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(base: usize) -> (Params<f64>, Discriminator) {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut p = Params::<f64>::new();
        let d = Discriminator::new(&mut p, &mut rng, &DiscriminatorConfig { base });
        (p, d)
    }

    #[test]
    fn score_grid_at_128_is_14x14() {
        let (p, d) = disc(2);
        let x = Array4::<f64>::from_elem((1, 1, 128, 128), 0.5);
        let map = d.discriminate(&p, &x).unwrap();
        assert_eq!(map.scores.dim(), (1, 1, 14, 14));
        assert!(map.num_patches() > 1);
    }

    #[test]
    fn doubling_input_grows_the_grid() {
        let (p, d) = disc(2);
        let small = d.discriminate(&p, &Array4::<f64>::from_elem((1, 1, 64, 64), 0.3)).unwrap();
        let large = d.discriminate(&p, &Array4::<f64>::from_elem((1, 1, 128, 128), 0.3)).unwrap();
        assert!(large.scores.dim().2 > small.scores.dim().2);
        assert!(large.scores.dim().3 > small.scores.dim().3);
    }

    #[test]
    fn zero_head_scores_zero() {
        let (mut p, d) = disc(2);
        p.get_mut(d.head.w).fill(0.0);
        p.get_mut(d.head.b).fill(0.0);
        let map = d.discriminate(&p, &Array4::<f64>::from_elem((1, 1, 32, 32), 0.7)).unwrap();
        assert!(map.scores.iter().all(|&v| v == 0.0));
        assert_eq!(map.mean, 0.0);
    }

    #[test]
    fn mean_matches_scores() {
        let (p, d) = disc(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array::from_shape_fn((2, 1, 32, 32), |_| rng.random_range(0.0..1.0));
        let map = d.discriminate(&p, &x).unwrap();
        let want = map.scores.iter().sum::<f64>() / map.scores.len() as f64;
        assert!((map.mean - want).abs() < 1e-6);
    }

    #[test]
    fn too_small_input_rejected() {
        let (p, d) = disc(2);
        let x = Array4::<f64>::from_elem((1, 1, 16, 16), 0.5);
        assert!(matches!(d.discriminate(&p, &x), Err(Error::InputTooSmall { .. })));
    }

    #[test]
    fn features_have_decreasing_resolution_and_match_scores_pass() {
        let (p, d) = disc(2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array::from_shape_fn((1, 1, 48, 48), |_| rng.random_range(0.0..1.0));
        let (map, feats, _) = d.forward(&p, &x).unwrap();
        assert_eq!(feats.layers.len(), NUM_FEATURE_LAYERS);
        for wnd in feats.layers.windows(2) {
            assert!(wnd[1].dim().2 <= wnd[0].dim().2);
        }
        let feats2 = d.extract_features(&p, &x).unwrap();
        for (a, b) in feats.layers.iter().zip(&feats2.layers) {
            assert_eq!(a, b);
        }
        let map2 = d.discriminate(&p, &x).unwrap();
        assert_eq!(map.scores, map2.scores);
    }

    #[test]
    fn mean_score_gradient_matches_finite_differences() {
        let (p, d) = disc(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array::from_shape_fn((1, 1, 32, 32), |_| rng.random_range(0.0..1.0));
        let (map, _, cache) = d.forward(&p, &x).unwrap();
        // d mean / d scores = 1/len
        let dscore = Array4::from_elem(map.scores.dim(), 1.0 / map.scores.len() as f64);
        let dx = d.backward(&p, &cache, &dscore, None, None);

        let h = 1e-6;
        for idx in [[0usize, 0, 0, 0], [0, 0, 13, 20], [0, 0, 31, 31], [0, 0, 16, 5]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fp = d.discriminate(&p, &xp).unwrap().mean;
            let fm = d.discriminate(&p, &xm).unwrap().mean;
            let fd = (fp - fm) / (2.0 * h);
            if fd.abs() > 1e-9 {
                let rel = (dx[idx] - fd).abs() / fd.abs().max(1e-9);
                assert!(rel < 1e-3, "{idx:?}: got {} fd {fd}", dx[idx]);
            }
        }
    }
}
