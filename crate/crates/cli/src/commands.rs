//! Command implementations behind the CLI surface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use vqe_core::bench::time_alignment;
use vqe_core::config::AlignBackend;
use vqe_core::eval::{evaluate_sequence, qp_study};
use vqe_core::frame::{
    degrade, load_frame_dir, load_yuv420_frames, sample_patches, save_frame_dir, save_png_gray,
    synthetic_sequence, write_samples, LumaFrame, QpCode,
};
use vqe_core::frame::make_triplets;
use vqe_core::metrics::{perceptual_distance, psnr};
use vqe_core::train::{load_dataset, train, ExperimentConfig, Trainer};

use crate::plot;

/// Load a sequence from a PNG directory or a raw YUV file.
pub fn load_sequence(input: &Path, yuv_dims: Option<(usize, usize)>) -> Result<Vec<LumaFrame>> {
    if input.is_dir() {
        Ok(load_frame_dir(input)?)
    } else {
        let (w, h) = yuv_dims
            .ok_or_else(|| anyhow!("raw YUV input needs --width and --height"))?;
        Ok(load_yuv420_frames(input, w, h)?)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn prepare_data(
    out: &Path,
    input: Option<&Path>,
    yuv_dims: Option<(usize, usize)>,
    synthetic: Option<usize>,
    size: (usize, usize),
    degraded_dir: Option<&Path>,
    qps: &[u8],
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<()> {
    let raw = match (input, synthetic) {
        (Some(dir), _) => load_sequence(dir, yuv_dims)?,
        (None, Some(n)) => synthetic_sequence(n, size.0, size.1, seed),
        (None, None) => bail!("either --input or --synthetic is required"),
    };
    fs::create_dir_all(out)?;
    save_frame_dir(&out.join("raw"), &raw)?;

    for &qp in qps {
        let degraded: Vec<LumaFrame> = match degraded_dir {
            Some(dir) => {
                let sub = dir.join(format!("qp{qp}"));
                let frames = load_frame_dir(&sub)
                    .with_context(|| format!("pre-degraded frames for qp {qp} in {}", sub.display()))?;
                if frames.len() != raw.len() {
                    bail!("qp {qp}: {} degraded frames for {} raw frames", frames.len(), raw.len());
                }
                frames
            }
            None => raw.iter().map(|f| degrade(f, qp)).collect::<vqe_core::Result<_>>()?,
        };
        let code = QpCode::encode(qp)?;
        let samples = sample_patches(&raw, &degraded, patch, count, seed ^ (qp as u64) << 32, code)?;
        let path = out.join(format!("qp{qp}.vqes"));
        write_samples(&path, &samples)?;
        println!("wrote {} samples to {}", samples.len(), path.display());
    }
    Ok(())
}

pub struct TrainOverrides {
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub backend: Option<AlignBackend>,
    pub vgg_weights: Option<PathBuf>,
}

pub fn run_train(config_path: &Path, ov: TrainOverrides) -> Result<()> {
    let mut exp = ExperimentConfig::from_toml_file(config_path)?;
    if let Some(seed) = ov.seed {
        exp.training.seed = seed;
    }
    if let Some(steps) = ov.steps {
        exp.training.steps = steps;
    }
    if let Some(backend) = ov.backend {
        exp.arch.backend = Some(backend);
    }
    if let Some(w) = ov.vgg_weights {
        exp.data.vgg_weights = Some(w);
    }
    let dataset_dir = exp
        .data
        .dataset_dir
        .clone()
        .ok_or_else(|| anyhow!("config is missing data.dataset_dir"))?;
    let out_dir = ov.out.unwrap_or_else(|| PathBuf::from("runs/default"));

    let dataset = load_dataset(&exp.training, &dataset_dir)?;
    let trainer = match &ov.resume {
        Some(ckpt) => {
            let t = Trainer::load(ckpt)?;
            println!("resumed from {} at step {}", ckpt.display(), t.step);
            t
        }
        None => {
            if exp.data.vgg_weights.is_none() {
                eprintln!(
                    "note: no --vgg-weights given; using the seeded random perceptual extractor (seed {})",
                    exp.arch.extractor.seed
                );
            }
            Trainer::with_vgg_weights(
                exp.training.clone(),
                exp.arch.clone(),
                exp.data.vgg_weights.as_deref(),
            )?
        }
    };
    let outcome = train(trainer, &dataset, &out_dir)?;
    println!(
        "trained {} steps; checkpoint {}, loss log {}",
        outcome.steps_run,
        outcome.checkpoint.display(),
        outcome.loss_log.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn enhance(
    checkpoint: &Path,
    input: &Path,
    yuv_dims: Option<(usize, usize)>,
    qp: u8,
    out: &Path,
    reference: Option<&Path>,
    panel: bool,
) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let frames = load_sequence(input, yuv_dims)?;
    fs::create_dir_all(out)?;

    let reference_frames = reference.map(|r| load_sequence(r, yuv_dims)).transpose()?;
    let enhanced = vqe_core::eval::enhance_sequence(&trainer, &frames, qp)?;
    for (i, f) in enhanced.iter().enumerate() {
        save_png_gray(&out.join(format!("{i:06}.png")), f)?;
    }
    println!("enhanced {} frames into {}", enhanced.len(), out.display());

    if panel {
        let panel_dir = out.join("panel");
        fs::create_dir_all(&panel_dir)?;
        for (i, (d, e)) in frames.iter().zip(&enhanced).enumerate() {
            let mut cols = vec![d, e];
            if let Some(rf) = &reference_frames {
                cols.push(&rf[i]);
            }
            save_png_gray(&panel_dir.join(format!("{i:06}.png")), &hstack(&cols)?)?;
        }
    }

    if let Some(rf) = &reference_frames {
        let (_, report) = evaluate_sequence(&trainer, &frames, rf, qp, &checkpoint.display().to_string())?;
        let csv = out.join("metrics.csv");
        write_metric_csv(&csv, &report, rf, &frames)?;
        println!(
            "mean psnr {:.2} dB, mean perceptual distance {:.5} ({})",
            report.mean_psnr_db,
            report.mean_perceptual,
            csv.display()
        );
    }
    Ok(())
}

fn hstack(frames: &[&LumaFrame]) -> Result<LumaFrame> {
    let h = frames[0].height();
    let gap = 4usize;
    let total_w: usize = frames.iter().map(|f| f.width()).sum::<usize>() + gap * (frames.len() - 1);
    let mut px = ndarray::Array2::<f32>::from_elem((h, total_w), 1.0);
    let mut x0 = 0usize;
    for f in frames {
        px.slice_mut(ndarray::s![.., x0..x0 + f.width()]).assign(f.pixels());
        x0 += f.width() + gap;
    }
    Ok(LumaFrame::new(px)?)
}

fn write_metric_csv(
    path: &Path,
    report: &vqe_core::metrics::MetricReport,
    reference: &[LumaFrame],
    degraded: &[LumaFrame],
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "frame,psnr_db,perceptual_distance,input_psnr_db,qp,backend,checkpoint"
    )?;
    for row in &report.frames {
        let input_psnr = psnr(&degraded[row.frame_index], &reference[row.frame_index])?;
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            row.frame_index, row.psnr_db, row.perceptual, input_psnr, report.qp, report.backend, report.checkpoint
        )?;
    }
    Ok(())
}

pub fn evaluate(
    checkpoint: &Path,
    input: &Path,
    yuv_dims: Option<(usize, usize)>,
    reference: &Path,
    qp: u8,
    out_csv: &Path,
) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let degraded = load_sequence(input, yuv_dims)?;
    let reference = load_sequence(reference, yuv_dims)?;
    let (_, report) = evaluate_sequence(&trainer, &degraded, &reference, qp, &checkpoint.display().to_string())?;
    write_metric_csv(out_csv, &report, &reference, &degraded)?;
    println!(
        "qp {}: mean psnr {:.2} dB, mean perceptual distance {:.5}",
        qp, report.mean_psnr_db, report.mean_perceptual
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn run_qp_study(
    checkpoints: &[(String, PathBuf)],
    test_qps: &[u8],
    reference: Option<&Path>,
    yuv_dims: Option<(usize, usize)>,
    synthetic: Option<usize>,
    size: (usize, usize),
    seed: u64,
    out: &Path,
) -> Result<()> {
    if checkpoints.is_empty() {
        bail!("at least one --checkpoint name=path is required");
    }
    let raw = match (reference, synthetic) {
        (Some(dir), _) => load_sequence(dir, yuv_dims)?,
        (None, Some(n)) => synthetic_sequence(n, size.0, size.1, seed),
        (None, None) => bail!("either --reference or --synthetic is required"),
    };
    let loaded: Vec<(String, Trainer)> = checkpoints
        .iter()
        .map(|(name, path)| Ok((name.clone(), Trainer::load(path)?)))
        .collect::<Result<_>>()?;
    let models: Vec<(String, &Trainer)> = loaded.iter().map(|(n, t)| (n.clone(), t)).collect();
    let cells = qp_study(&models, test_qps, &raw)?;

    fs::create_dir_all(out)?;
    let csv_path = out.join("qp_study.csv");
    let mut f = fs::File::create(&csv_path)?;
    writeln!(f, "model,test_qp,perceptual_distance,mean_psnr_db")?;
    for c in &cells {
        writeln!(f, "{},{},{},{}", c.model, c.test_qp, c.perceptual, c.mean_psnr_db)?;
    }

    let groups: Vec<String> = test_qps.iter().map(|q| format!("QP{q}")).collect();
    let series: Vec<(String, Vec<f64>)> = models
        .iter()
        .map(|(name, _)| {
            let vals = test_qps
                .iter()
                .map(|&q| {
                    cells
                        .iter()
                        .find(|c| c.model == *name && c.test_qp == q)
                        .map(|c| c.perceptual)
                        .unwrap_or(0.0)
                })
                .collect();
            (name.clone(), vals)
        })
        .collect();
    let plot_path = out.join("qp_study.png");
    plot::grouped_bars(
        &plot_path,
        "PERCEPTUAL DISTANCE BY TEST QP",
        "DIST",
        &groups,
        &series,
    )?;
    println!("wrote {} and {}", csv_path.display(), plot_path.display());
    for c in &cells {
        println!(
            "  {} @ QP{}: perceptual {:.5}, psnr {:.2} dB",
            c.model, c.test_qp, c.perceptual, c.mean_psnr_db
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn bench_align(
    dconv_checkpoint: &Path,
    flow_checkpoint: &Path,
    resolution: usize,
    runs: usize,
    warmup: usize,
    qp: u8,
    frames: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let raw = synthetic_sequence(frames.max(3), resolution, resolution, seed);
    let degraded: Vec<LumaFrame> = raw
        .iter()
        .map(|f| degrade(f, qp))
        .collect::<vqe_core::Result<_>>()?;
    let triplets = make_triplets(&degraded)?;
    let mid = &triplets[triplets.len() / 2];
    let input = vqe_core::align::triplets_to_tensor::<f32>(&[mid]);

    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (name, path) in [("dconv", dconv_checkpoint), ("flow", flow_checkpoint)] {
        let trainer = Trainer::load(path)?;
        let backend = trainer.gen.align.backend();
        if backend.to_string() != name {
            bail!(
                "checkpoint {} uses backend {backend}, expected {name}",
                path.display()
            );
        }
        let bench = time_alignment(&trainer.gen, &trainer.gen_params, &input, warmup, runs);
        // quality on the same synthetic material
        let enhanced = vqe_core::eval::enhance_sequence(&trainer, &degraded, qp)?;
        let mut pd = 0.0;
        for (e, r) in enhanced.iter().zip(&raw) {
            pd += perceptual_distance(&trainer.extractor, &trainer.ext_params, e, r)?;
        }
        let pd = pd / enhanced.len() as f64;
        println!(
            "{name}: median {:.2} ms, mean {:.2} ms over {} runs at {}x{}; perceptual {:.5}",
            bench.median_ms, bench.mean_ms, bench.runs, bench.height, bench.width, pd
        );
        rows.push((bench, pd));
    }

    let csv_path = out.join("bench_align.csv");
    let mut f = fs::File::create(&csv_path)?;
    writeln!(
        f,
        "backend,median_ms,mean_ms,runs,batch,height,width,perceptual_distance"
    )?;
    for (b, pd) in &rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            b.backend, b.median_ms, b.mean_ms, b.runs, b.batch, b.height, b.width, pd
        )?;
    }
    let points: Vec<(f64, f64, String)> = rows
        .iter()
        .map(|(b, pd)| (b.median_ms, *pd, b.backend.clone()))
        .collect();
    let plot_path = out.join("bench_align.png");
    plot::scatter(
        &plot_path,
        "ALIGNMENT RUNTIME VS QUALITY",
        "MEDIAN MS PER TRIPLET",
        "DIST",
        &points,
    )?;
    println!("wrote {} and {}", csv_path.display(), plot_path.display());
    Ok(())
}
