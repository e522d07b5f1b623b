//! Multi-frame alignment: a U-Net predicts per-pixel sampling offsets for
//! every frame and kernel tap, and a single deformable convolution fuses the
//! three luminance frames into one aligned feature map.

mod dconv;
mod unet;

pub use dconv::{bilinear_sample, deformable_conv, DeformConv2d, DeformConv2dCache};
pub use unet::{OffsetUnet, OffsetUnetCache};

use ndarray::Array4;
use rand::Rng;

use crate::config::GeneratorConfig;
use crate::error::Result;
use crate::frame::FrameTriplet;
use crate::nn::{Grads, Params, Scalar};

/// Frames fused per alignment pass.
pub const NUM_FRAMES: usize = 3;
/// Deformable kernel size.
pub const KERNEL: usize = 3;
/// Offset channels: frames x spatial dims x kernel taps.
pub const OFFSET_CHANNELS: usize = NUM_FRAMES * 2 * KERNEL * KERNEL;

/// Per-pixel sampling displacements, `[n, 54, h, w]`.
///
/// Channel layout: `c = (t * K * K + k) * 2 + d` for frame `t`, tap
/// `k = ky * K + kx`, and `d` = 0 for vertical, 1 for horizontal.
#[derive(Debug, Clone)]
pub struct OffsetField<F> {
    data: Array4<F>,
}

impl<F: Scalar> OffsetField<F> {
    pub fn new(data: Array4<F>) -> Result<Self> {
        let (_, c, _, _) = data.dim();
        if c != OFFSET_CHANNELS {
            return Err(crate::error::Error::shape(format!(
                "offset field has {c} channels, expected {OFFSET_CHANNELS}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(crate::error::Error::shape("offset field contains non-finite values"));
        }
        Ok(OffsetField { data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        OffsetField {
            data: Array4::zeros((n, OFFSET_CHANNELS, h, w)),
        }
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_data(self) -> Array4<F> {
        self.data
    }

    pub fn channels(&self) -> usize {
        OFFSET_CHANNELS
    }
}

/// Fused aligned representation, `[n, c_a, h, w]`.
#[derive(Debug, Clone)]
pub struct AlignedFeature<F> {
    pub features: Array4<F>,
}

/// Alignment module: offset U-Net followed by one deformable convolution.
#[derive(Debug, Clone)]
pub struct DeformAlign {
    pub unet: OffsetUnet,
    pub dconv: DeformConv2d,
}

pub struct DeformAlignCache<F> {
    unet: OffsetUnetCache<F>,
    dconv: DeformConv2dCache<F>,
    pub offsets: Array4<F>,
}

impl DeformAlign {
    pub fn new<F: Scalar, R: Rng>(params: &mut Params<F>, rng: &mut R, name: &str, cfg: &GeneratorConfig) -> Self {
        let unet = OffsetUnet::new(params, rng, &format!("{name}.unet"), cfg.unet_levels, cfg.unet_base, cfg.offset_head_kernel);
        let dconv = DeformConv2d::new(params, rng, &format!("{name}.dconv"), cfg.aligned_channels);
        DeformAlign { unet, dconv }
    }

    /// Predict offsets and fuse the stacked frames; output spatial dims
    /// equal input dims.
    pub fn forward<F: Scalar>(&self, p: &Params<F>, frames: &Array4<F>) -> (Array4<F>, DeformAlignCache<F>) {
        let (offsets, unet_cache) = self.unet.forward(p, frames);
        let (aligned, dconv_cache) = self.dconv.forward(p, frames, &offsets);
        (
            aligned,
            DeformAlignCache {
                unet: unet_cache,
                dconv: dconv_cache,
                offsets,
            },
        )
    }

    /// Returns the gradient w.r.t. the input frames.
    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &DeformAlignCache<F>,
        dy: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let (dframes_direct, doffsets) = self.dconv.backward(p, &cache.dconv, dy, grads.as_deref_mut());
        let dframes_unet = self.unet.backward(p, &cache.unet, &doffsets, grads);
        dframes_direct + dframes_unet
    }

    pub fn update_running<F: Scalar>(&self, _p: &mut Params<F>, _cache: &DeformAlignCache<F>) {
        // no normalization layers in the alignment path
    }
}

/// Stack a triplet into the `[1, 3, h, w]` layout the generator consumes.
pub fn triplet_to_tensor<F: Scalar>(t: &FrameTriplet) -> Array4<F> {
    let (h, w) = (t.height(), t.width());
    let mut out = Array4::<F>::zeros((1, NUM_FRAMES, h, w));
    for (ci, frame) in [&t.prev, &t.curr, &t.next].into_iter().enumerate() {
        let mut lane = out.slice_mut(ndarray::s![0, ci, .., ..]);
        ndarray::Zip::from(&mut lane).and(frame.pixels()).for_each(|o, &v| {
            *o = F::from_f64(v as f64);
        });
    }
    out
}

/// Stack several triplets into `[n, 3, h, w]`.
pub fn triplets_to_tensor<F: Scalar>(ts: &[&FrameTriplet]) -> Array4<F> {
    assert!(!ts.is_empty());
    let (h, w) = (ts[0].height(), ts[0].width());
    let mut out = Array4::<F>::zeros((ts.len(), NUM_FRAMES, h, w));
    for (ni, t) in ts.iter().enumerate() {
        for (ci, frame) in [&t.prev, &t.curr, &t.next].into_iter().enumerate() {
            let mut lane = out.slice_mut(ndarray::s![ni, ci, .., ..]);
            ndarray::Zip::from(&mut lane).and(frame.pixels()).for_each(|o, &v| {
                *o = F::from_f64(v as f64);
            });
        }
    }
    out
}
