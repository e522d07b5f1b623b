//! Evaluation metrics: PSNR and the perceptual feature distance.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::frame::LumaFrame;
use crate::losses::{vgg_loss, FeatureExtractor};
use crate::nn::{Params, Scalar};

/// Sentinel for infinite PSNR (identical frames), the value written to CSV.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(1 / MSE)` for `[0,1]`-range frames, capped at
/// [`PSNR_CAP_DB`] when the frames are identical.
pub fn psnr(a: &LumaFrame, b: &LumaFrame) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape("psnr needs equal frame dimensions"));
    }
    let n = (a.height() * a.width()) as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Perceptual distance: the layer-normalized feature L1 used by the
/// training objective, reused as a metric (lower is better).
pub fn perceptual_distance<F: Scalar>(
    extractor: &FeatureExtractor,
    p: &Params<F>,
    a: &LumaFrame,
    b: &LumaFrame,
) -> Result<f64> {
    let ta = frame_to_tensor::<F>(a);
    let tb = frame_to_tensor::<F>(b);
    Ok(vgg_loss(extractor, p, &ta, &tb)?.to_f64())
}

/// `[1, 1, h, w]` tensor view of a frame.
pub fn frame_to_tensor<F: Scalar>(f: &LumaFrame) -> Array4<F> {
    let (h, w) = (f.height(), f.width());
    let mut out = Array4::<F>::zeros((1, 1, h, w));
    let mut lane = out.slice_mut(ndarray::s![0, 0, .., ..]);
    ndarray::Zip::from(&mut lane).and(f.pixels()).for_each(|o, &v| {
        *o = F::from_f64(v as f64);
    });
    out
}

/// Per-frame metrics of one evaluated sequence.
#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub psnr_db: f64,
    pub perceptual: f64,
}

/// Sequence-level metric report with run metadata.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr_db: f64,
    pub mean_perceptual: f64,
    pub qp: u8,
    pub backend: String,
    pub checkpoint: String,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>, qp: u8, backend: String, checkpoint: String) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_psnr_db = frames.iter().map(|f| f.psnr_db).sum::<f64>() / n;
        let mean_perceptual = frames.iter().map(|f| f.perceptual).sum::<f64>() / n;
        MetricReport {
            frames,
            mean_psnr_db,
            mean_perceptual,
            qp,
            backend,
            checkpoint,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExtractorConfig;
    use crate::frame::synthetic_sequence;
    use ndarray::Array2;

    #[test]
    fn identical_frames_hit_the_cap() {
        let f = &synthetic_sequence(1, 16, 16, 1)[0];
        assert_eq!(psnr(f, f).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn black_vs_white_is_zero_db() {
        let a = LumaFrame::new(Array2::zeros((8, 8))).unwrap();
        let b = LumaFrame::new(Array2::from_elem((8, 8), 1.0)).unwrap();
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn mse_of_one_percent_is_twenty_db() {
        let a = LumaFrame::new(Array2::zeros((8, 8))).unwrap();
        let b = LumaFrame::new(Array2::from_elem((8, 8), 0.1)).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn perceptual_distance_is_symmetric_and_zero_on_self() {
        let mut p = crate::nn::Params::<f32>::new();
        let e = FeatureExtractor::new(&mut p, &ExtractorConfig { base: 4, ..ExtractorConfig::desk() }).unwrap();
        let seq = synthetic_sequence(2, 16, 16, 5);
        assert_eq!(perceptual_distance(&e, &p, &seq[0], &seq[0]).unwrap(), 0.0);
        let ab = perceptual_distance(&e, &p, &seq[0], &seq[1]).unwrap();
        let ba = perceptual_distance(&e, &p, &seq[1], &seq[0]).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-9);
    }
}
