//! Frame data plane: luminance extraction, synthetic compression
//! degradation, triplet assembly and patch sampling.

mod archive;
mod dct;
mod io;
mod synth;

pub use archive::{read_samples, write_samples};
pub use dct::degrade;
pub use io::{load_frame_dir, load_png_gray, load_yuv420_frames, save_frame_dir, save_png_gray};
pub use synth::synthetic_sequence;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// QPs the conditional generator supports; the one-hot code length is fixed
/// by this set.
pub const QP_SET: [u8; 4] = [22, 27, 32, 37];

/// One luminance plane with values in `[0, 1]`. Minimum size is 8x8, one
/// transform block.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaFrame {
    pixels: Array2<f32>,
}

impl LumaFrame {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < 8 || w < 8 {
            return Err(Error::MalformedInput(format!(
                "frame {h}x{w} below 8x8 minimum"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::MalformedInput(
                "pixel values must be finite and within [0,1]".into(),
            ));
        }
        Ok(LumaFrame { pixels })
    }

    /// Clamp into range instead of rejecting; for outputs of numeric
    /// pipelines where float noise may leave [0,1] by an ulp.
    pub fn from_clamped(mut pixels: Array2<f32>) -> Result<Self> {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(pixels)
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> LumaFrame {
        LumaFrame {
            pixels: self.pixels.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned(),
        }
    }
}

/// Three consecutive frames centered on `curr`.
#[derive(Debug, Clone)]
pub struct FrameTriplet {
    pub prev: LumaFrame,
    pub curr: LumaFrame,
    pub next: LumaFrame,
    pub frame_index: usize,
}

impl FrameTriplet {
    pub fn new(prev: LumaFrame, curr: LumaFrame, next: LumaFrame, frame_index: usize) -> Result<Self> {
        let dims = (curr.height(), curr.width());
        if (prev.height(), prev.width()) != dims || (next.height(), next.width()) != dims {
            return Err(Error::shape("triplet frames must share dimensions"));
        }
        Ok(FrameTriplet {
            prev,
            curr,
            next,
            frame_index,
        })
    }

    pub fn height(&self) -> usize {
        self.curr.height()
    }

    pub fn width(&self) -> usize {
        self.curr.width()
    }
}

/// One-hot encoding of a supported QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpCode {
    qp: u8,
    index: usize,
}

impl QpCode {
    /// Encode against the supported set; rejects anything outside it.
    pub fn encode(qp: u8) -> Result<Self> {
        match QP_SET.iter().position(|&q| q == qp) {
            Some(index) => Ok(QpCode { qp, index }),
            None => Err(Error::UnsupportedQp {
                qp,
                supported: QP_SET.to_vec(),
            }),
        }
    }

    pub fn qp(&self) -> u8 {
        self.qp
    }

    pub fn hot_index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        QP_SET.len()
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn onehot<F: crate::nn::Scalar>(&self) -> Vec<F> {
        let mut v = vec![F::zero(); QP_SET.len()];
        v[self.index] = F::one();
        v
    }
}

/// A degraded triplet, its raw target frame and the QP label.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub degraded: FrameTriplet,
    pub target: LumaFrame,
    pub qp: QpCode,
}

impl TrainingSample {
    pub fn new(degraded: FrameTriplet, target: LumaFrame, qp: QpCode) -> Result<Self> {
        if (degraded.height(), degraded.width()) != (target.height(), target.width()) {
            return Err(Error::shape("degraded triplet and target must share dimensions"));
        }
        Ok(TrainingSample { degraded, target, qp })
    }
}

/// Pixel layout tags accepted by [`extract_luma`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelFormat {
    Gray8,
    Rgb8,
    Yuv420p,
}

impl std::str::FromStr for PixelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gray8" | "gray" | "y8" => Ok(PixelFormat::Gray8),
            "rgb8" | "rgb" => Ok(PixelFormat::Rgb8),
            "yuv420p" | "i420" | "yuv" => Ok(PixelFormat::Yuv420p),
            other => Err(Error::UnsupportedFormat(other.into())),
        }
    }
}

/// Luminance plane of a raw frame buffer, scaled to `[0, 1]`.
///
/// RGB uses the BT.601 weights (0.299, 0.587, 0.114); YUV 4:2:0 returns the
/// Y plane unchanged.
pub fn extract_luma(data: &[u8], format: PixelFormat, width: usize, height: usize) -> Result<LumaFrame> {
    let hw = width * height;
    let scale = 1.0f32 / 255.0;
    let pixels = match format {
        PixelFormat::Gray8 => {
            if data.len() != hw {
                return Err(Error::MalformedInput(format!(
                    "gray8 buffer has {} bytes, expected {hw}",
                    data.len()
                )));
            }
            Array2::from_shape_vec((height, width), data.iter().map(|&b| b as f32 * scale).collect()).unwrap()
        }
        PixelFormat::Rgb8 => {
            if data.len() != 3 * hw {
                return Err(Error::MalformedInput(format!(
                    "rgb8 buffer has {} bytes, expected {}",
                    data.len(),
                    3 * hw
                )));
            }
            Array2::from_shape_vec(
                (height, width),
                data.chunks_exact(3)
                    .map(|px| (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32) * scale)
                    .collect(),
            )
            .unwrap()
        }
        PixelFormat::Yuv420p => {
            let chroma = width.div_ceil(2) * height.div_ceil(2);
            if data.len() != hw + 2 * chroma {
                return Err(Error::MalformedInput(format!(
                    "yuv420p buffer has {} bytes, expected {}",
                    data.len(),
                    hw + 2 * chroma
                )));
            }
            Array2::from_shape_vec((height, width), data[..hw].iter().map(|&b| b as f32 * scale).collect())
                .unwrap()
        }
    };
    LumaFrame::new(pixels)
}

/// One triplet per frame; sequence boundaries replicate the edge frame.
pub fn make_triplets(sequence: &[LumaFrame]) -> Result<Vec<FrameTriplet>> {
    if sequence.is_empty() {
        return Err(Error::EmptyInput("frame sequence"));
    }
    let n = sequence.len();
    (0..n)
        .map(|t| {
            FrameTriplet::new(
                sequence[t.saturating_sub(1)].clone(),
                sequence[t].clone(),
                sequence[(t + 1).min(n - 1)].clone(),
                t,
            )
        })
        .collect()
}

/// Draw `count` training samples by cropping the same seeded random window
/// from the raw target frame and all three degraded triplet frames.
pub fn sample_patches(
    raw_seq: &[LumaFrame],
    degraded_seq: &[LumaFrame],
    patch: usize,
    count: usize,
    seed: u64,
    qp: QpCode,
) -> Result<Vec<TrainingSample>> {
    if raw_seq.is_empty() || degraded_seq.is_empty() {
        return Err(Error::EmptyInput("frame sequence"));
    }
    if raw_seq.len() != degraded_seq.len() {
        return Err(Error::shape(format!(
            "raw sequence has {} frames, degraded has {}",
            raw_seq.len(),
            degraded_seq.len()
        )));
    }
    let (h, w) = (raw_seq[0].height(), raw_seq[0].width());
    for (r, d) in raw_seq.iter().zip(degraded_seq) {
        if (r.height(), r.width()) != (h, w) || (d.height(), d.width()) != (h, w) {
            return Err(Error::shape("all frames must share dimensions"));
        }
    }
    if patch > h.min(w) || patch == 0 {
        return Err(Error::InvalidPatch {
            patch,
            height: h,
            width: w,
        });
    }

    let n = raw_seq.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = rng.random_range(0..n);
            let y0 = rng.random_range(0..=h - patch);
            let x0 = rng.random_range(0..=w - patch);
            let crop = |f: &LumaFrame| f.crop(y0, x0, patch, patch);
            let triplet = FrameTriplet::new(
                crop(&degraded_seq[t.saturating_sub(1)]),
                crop(&degraded_seq[t]),
                crop(&degraded_seq[(t + 1).min(n - 1)]),
                t,
            )?;
            TrainingSample::new(triplet, crop(&raw_seq[t]), qp)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f32, h: usize, w: usize) -> LumaFrame {
        LumaFrame::new(Array2::from_elem((h, w), v)).unwrap()
    }

    #[test]
    fn gray_max_value_maps_to_one() {
        let f = extract_luma(&vec![255u8; 64], PixelFormat::Gray8, 8, 8).unwrap();
        assert!(f.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rgb_red_uses_bt601_weight() {
        let mut buf = vec![0u8; 8 * 8 * 3];
        for px in buf.chunks_exact_mut(3) {
            px[0] = 255;
        }
        let f = extract_luma(&buf, PixelFormat::Rgb8, 8, 8).unwrap();
        assert!((f.pixels()[[0, 0]] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn yuv_returns_y_plane_scaled() {
        let w = 8;
        let h = 8;
        let mut buf = vec![0u8; w * h + 2 * 16];
        for (i, b) in buf[..w * h].iter_mut().enumerate() {
            *b = i as u8;
        }
        let f = extract_luma(&buf, PixelFormat::Yuv420p, w, h).unwrap();
        assert!((f.pixels()[[1, 2]] - 10.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn buffer_size_mismatch_is_malformed() {
        let err = extract_luma(&[0u8; 10], PixelFormat::Gray8, 8, 8).unwrap_err();
        assert!(matches!(err, Error::MalformedInput(_)));
    }

    #[test]
    fn unknown_format_is_unsupported() {
        let err = "bgr10".parse::<PixelFormat>().unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }

    #[test]
    fn triplets_replicate_edges() {
        let a = flat(0.1, 8, 8);
        let b = flat(0.2, 8, 8);
        let c = flat(0.3, 8, 8);

        let single = make_triplets(&[a.clone()]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].prev, a);
        assert_eq!(single[0].next, a);

        let t = make_triplets(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!((&t[0].prev, &t[0].curr, &t[0].next), (&a, &a, &b));
        assert_eq!((&t[1].prev, &t[1].curr, &t[1].next), (&a, &b, &c));
        assert_eq!((&t[2].prev, &t[2].curr, &t[2].next), (&b, &c, &c));
    }

    #[test]
    fn triplets_preserve_current_frame_identity() {
        let seq: Vec<_> = (0..5).map(|i| flat(i as f32 / 10.0, 8, 8)).collect();
        let t = make_triplets(&seq).unwrap();
        assert_eq!(t.len(), seq.len());
        for (i, tr) in t.iter().enumerate() {
            assert_eq!(tr.curr, seq[i]);
            assert_eq!(tr.frame_index, i);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(matches!(make_triplets(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn patch_sampling_is_deterministic() {
        let seq = synthetic_sequence(4, 32, 32, 9);
        let deg: Vec<_> = seq.iter().map(|f| degrade(f, 37).unwrap()).collect();
        let qp = QpCode::encode(37).unwrap();
        let a = sample_patches(&seq, &deg, 16, 5, 123, qp).unwrap();
        let b = sample_patches(&seq, &deg, 16, 5, 123, qp).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.degraded.curr, y.degraded.curr);
        }
    }

    #[test]
    fn full_frame_patch_is_identity_crop() {
        let seq = synthetic_sequence(2, 16, 16, 1);
        let deg: Vec<_> = seq.iter().map(|f| degrade(f, 32).unwrap()).collect();
        let qp = QpCode::encode(32).unwrap();
        let samples = sample_patches(&seq, &deg, 16, 3, 7, qp).unwrap();
        for s in samples {
            let t = s.degraded.frame_index;
            assert_eq!(&s.target, &seq[t]);
            assert_eq!(&s.degraded.curr, &deg[t]);
        }
    }

    #[test]
    fn oversized_patch_rejected() {
        let seq = synthetic_sequence(1, 16, 16, 1);
        let qp = QpCode::encode(22).unwrap();
        let err = sample_patches(&seq, &seq, 17, 1, 0, qp).unwrap_err();
        assert!(matches!(err, Error::InvalidPatch { .. }));
    }

    #[test]
    fn block_aligned_crop_commutes_with_degradation() {
        // degradation is 8x8-block-local, so cropping on block boundaries
        // before or after degrading gives the same pixels
        let seq = synthetic_sequence(1, 64, 64, 3);
        let deg = degrade(&seq[0], 37).unwrap();
        let (y0, x0, p) = (8, 16, 32);
        let cropped_then_degraded = degrade(&seq[0].crop(y0, x0, p, p), 37).unwrap();
        let degraded_then_cropped = deg.crop(y0, x0, p, p);
        let max = cropped_then_degraded
            .pixels()
            .iter()
            .zip(degraded_then_cropped.pixels())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(max < 1e-6, "max deviation {max}");
    }

    #[test]
    fn qp_code_encoding() {
        assert_eq!(QpCode::encode(22).unwrap().onehot::<f32>(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(QpCode::encode(37).unwrap().onehot::<f32>(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(QpCode::encode(27).unwrap().hot_index(), 1);
        assert!(matches!(QpCode::encode(30), Err(Error::UnsupportedQp { .. })));
    }
}
