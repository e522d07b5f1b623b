//! Sequence-level evaluation: enhancement of whole sequences, metric
//! reports against references, and the QP-adaptation study grid.

use crate::error::{Error, Result};
use crate::frame::{degrade, make_triplets, LumaFrame};
use crate::metrics::{perceptual_distance, psnr, FrameMetrics, MetricReport};
use crate::train::Trainer;

/// Enhance every frame of a sequence at the given QP.
pub fn enhance_sequence(trainer: &Trainer, frames: &[LumaFrame], qp: u8) -> Result<Vec<LumaFrame>> {
    let triplets = make_triplets(frames)?;
    triplets
        .iter()
        .map(|t| trainer.gen.generate::<f32>(&trainer.gen_params, t, qp))
        .collect()
}

/// Enhance a degraded sequence and score it against the reference.
pub fn evaluate_sequence(
    trainer: &Trainer,
    degraded: &[LumaFrame],
    reference: &[LumaFrame],
    qp: u8,
    checkpoint_name: &str,
) -> Result<(Vec<LumaFrame>, MetricReport)> {
    if degraded.len() != reference.len() {
        return Err(Error::shape(format!(
            "degraded sequence has {} frames, reference {}",
            degraded.len(),
            reference.len()
        )));
    }
    let enhanced = enhance_sequence(trainer, degraded, qp)?;
    let mut rows = Vec::with_capacity(enhanced.len());
    for (i, (e, r)) in enhanced.iter().zip(reference).enumerate() {
        rows.push(FrameMetrics {
            frame_index: i,
            psnr_db: psnr(e, r)?,
            perceptual: perceptual_distance(&trainer.extractor, &trainer.ext_params, e, r)?,
        });
    }
    let report = MetricReport::from_frames(
        rows,
        qp,
        trainer.gen.align.backend().to_string(),
        checkpoint_name.to_string(),
    );
    Ok((enhanced, report))
}

/// One cell of the QP-adaptation grid.
#[derive(Debug, Clone)]
pub struct QpStudyCell {
    pub model: String,
    pub test_qp: u8,
    pub perceptual: f64,
    pub mean_psnr_db: f64,
}

/// Evaluate every model at every test QP on a shared raw sequence: the
/// sequence is degraded at the test QP, enhanced with that QP's code, and
/// scored against the raw frames with the first model's extractor config
/// (all models must share it for comparability).
pub fn qp_study(models: &[(String, &Trainer)], test_qps: &[u8], raw: &[LumaFrame]) -> Result<Vec<QpStudyCell>> {
    if models.is_empty() {
        return Err(Error::EmptyInput("model list"));
    }
    let ext_cfg = &models[0].1.arch.extractor;
    for (name, t) in models {
        if &t.arch.extractor != ext_cfg {
            return Err(Error::Config(format!(
                "model {name} uses a different extractor config; the study needs one shared metric"
            )));
        }
    }
    let mut cells = Vec::new();
    for &qp in test_qps {
        let degraded: Vec<LumaFrame> = raw.iter().map(|f| degrade(f, qp)).collect::<Result<_>>()?;
        for (name, trainer) in models {
            let enhanced = enhance_sequence(trainer, &degraded, qp)?;
            let mut pd = 0.0;
            let mut ps = 0.0;
            for (e, r) in enhanced.iter().zip(raw) {
                pd += perceptual_distance(&trainer.extractor, &trainer.ext_params, e, r)?;
                ps += psnr(e, r)?;
            }
            let n = enhanced.len() as f64;
            cells.push(QpStudyCell {
                model: name.clone(),
                test_qp: qp,
                perceptual: pd / n,
                mean_psnr_db: ps / n,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchConfig;
    use crate::frame::synthetic_sequence;
    use crate::train::{Trainer, TrainingConfig};

    fn tiny_trainer(seed: u64) -> Trainer {
        let mut arch = ArchConfig::desk();
        arch.generator.unet_base = 4;
        arch.generator.aligned_channels = 8;
        arch.generator.enc_base = 8;
        arch.discriminator.base = 4;
        arch.extractor.base = 4;
        let cfg = TrainingConfig {
            seed,
            steps: 0,
            ..TrainingConfig::desk()
        };
        Trainer::new(cfg, arch).unwrap()
    }

    #[test]
    fn enhancement_preserves_frame_count_and_range() {
        let t = tiny_trainer(3);
        let raw = synthetic_sequence(4, 24, 24, 9);
        let enhanced = enhance_sequence(&t, &raw, 37).unwrap();
        assert_eq!(enhanced.len(), raw.len());
        for f in &enhanced {
            assert_eq!((f.height(), f.width()), (24, 24));
            assert!(f.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn enhancement_is_deterministic() {
        let t = tiny_trainer(4);
        let raw = synthetic_sequence(2, 24, 24, 10);
        let a = enhance_sequence(&t, &raw, 22).unwrap();
        let b = enhance_sequence(&t, &raw, 22).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn unsupported_qp_is_rejected() {
        let t = tiny_trainer(5);
        let raw = synthetic_sequence(2, 24, 24, 11);
        assert!(matches!(
            enhance_sequence(&t, &raw, 30),
            Err(Error::UnsupportedQp { .. })
        ));
    }

    #[test]
    fn study_grid_has_models_times_qps_cells() {
        let t1 = tiny_trainer(6);
        let t2 = tiny_trainer(7);
        let raw = synthetic_sequence(2, 32, 32, 12);
        let cells = qp_study(
            &[("a".into(), &t1), ("b".into(), &t2)],
            &[22, 37],
            &raw,
        )
        .unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.perceptual >= 0.0));
    }
}
