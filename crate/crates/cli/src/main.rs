use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use vqe_cli::commands::{self, TrainOverrides};
use vqe_core::config::AlignBackend;

#[derive(Parser)]
#[command(
    name = "vqe",
    about = "Perceptual enhancement of compressed video: data preparation, adversarial training, inference, and evaluation studies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct YuvDims {
    /// Frame width for raw YUV 4:2:0 input files.
    #[arg(long)]
    width: Option<usize>,
    /// Frame height for raw YUV 4:2:0 input files.
    #[arg(long)]
    height: Option<usize>,
}

impl YuvDims {
    fn get(&self) -> Option<(usize, usize)> {
        match (self.width, self.height) {
            (Some(w), Some(h)) => Some((w, h)),
            _ => None,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build per-QP training sample archives from frames (or synthesize them).
    PrepareData {
        /// Output dataset directory (one qpN.vqes per QP, plus raw/ frames).
        #[arg(long)]
        out: PathBuf,
        /// Input frames: a directory of %06d.png or a raw .yuv file.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        yuv: YuvDims,
        /// Generate this many synthetic frames instead of reading input.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Synthetic frame size as HxW.
        #[arg(long, default_value = "96x96", value_parser = parse_size)]
        size: (usize, usize),
        /// Directory of externally encoded frames, one qpN/ subdir per QP.
        #[arg(long)]
        degraded_dir: Option<PathBuf>,
        /// Comma-separated QPs to prepare.
        #[arg(long, default_value = "22,27,32,37", value_delimiter = ',')]
        qps: Vec<u8>,
        /// Square patch size of the stored samples.
        #[arg(long, default_value_t = 64)]
        patch: usize,
        /// Samples per QP.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train (or resume) a model from a TOML experiment config.
    Train {
        /// Experiment config file ([training], [arch], [data] sections).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Alignment backend: dconv or flow.
        #[arg(long)]
        align_backend: Option<AlignBackend>,
        /// Pretrained perceptual-extractor weight container.
        #[arg(long)]
        vgg_weights: Option<PathBuf>,
    },
    /// Enhance a sequence with a trained checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input frames: PNG directory or raw .yuv file.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        yuv: YuvDims,
        /// QP the sequence was compressed at.
        #[arg(long)]
        qp: u8,
        #[arg(long)]
        out: PathBuf,
        /// Raw reference frames; enables metric output.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Also write [input | enhanced | reference] comparison panels.
        #[arg(long)]
        panel: bool,
    },
    /// Score an enhanced checkpoint against a reference sequence.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        yuv: YuvDims,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        qp: u8,
        /// Output CSV path.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Evaluate several checkpoints across test QPs (adaptation study).
    QpStudy {
        /// Repeatable name=path checkpoint entries.
        #[arg(long = "checkpoint", value_parser = parse_named_path)]
        checkpoints: Vec<(String, PathBuf)>,
        #[arg(long, default_value = "22,27,32,37", value_delimiter = ',')]
        test_qps: Vec<u8>,
        /// Raw reference frames (PNG dir or .yuv).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        yuv: YuvDims,
        /// Use this many synthetic frames instead of a reference.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value = "96x96", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare alignment-backend runtime and quality.
    BenchAlign {
        /// Checkpoint trained with the deformable backend.
        #[arg(long)]
        dconv_checkpoint: PathBuf,
        /// Checkpoint trained with the flow backend.
        #[arg(long)]
        flow_checkpoint: PathBuf,
        /// Square benchmark resolution.
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// QP of the synthetic quality comparison.
        #[arg(long, default_value_t = 37)]
        qp: u8,
        /// Synthetic frames for the quality comparison.
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    Ok((
        h.parse().map_err(|e| format!("bad height: {e}"))?,
        w.parse().map_err(|e| format!("bad width: {e}"))?,
    ))
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::PrepareData {
            out,
            input,
            yuv,
            synthetic,
            size,
            degraded_dir,
            qps,
            patch,
            count,
            seed,
        } => commands::prepare_data(
            &out,
            input.as_deref(),
            yuv.get(),
            synthetic,
            size,
            degraded_dir.as_deref(),
            &qps,
            patch,
            count,
            seed,
        ),
        Cmd::Train {
            config,
            out,
            resume,
            seed,
            steps,
            align_backend,
            vgg_weights,
        } => commands::run_train(
            &config,
            TrainOverrides {
                out,
                resume,
                seed,
                steps,
                backend: align_backend,
                vgg_weights,
            },
        ),
        Cmd::Enhance {
            checkpoint,
            input,
            yuv,
            qp,
            out,
            reference,
            panel,
        } => commands::enhance(&checkpoint, &input, yuv.get(), qp, &out, reference.as_deref(), panel),
        Cmd::Evaluate {
            checkpoint,
            input,
            yuv,
            reference,
            qp,
            out,
        } => commands::evaluate(&checkpoint, &input, yuv.get(), &reference, qp, &out),
        Cmd::QpStudy {
            checkpoints,
            test_qps,
            reference,
            yuv,
            synthetic,
            size,
            seed,
            out,
        } => commands::run_qp_study(
            &checkpoints,
            &test_qps,
            reference.as_deref(),
            yuv.get(),
            synthetic,
            size,
            seed,
            &out,
        ),
        Cmd::BenchAlign {
            dconv_checkpoint,
            flow_checkpoint,
            resolution,
            runs,
            warmup,
            qp,
            frames,
            seed,
            out,
        } => commands::bench_align(
            &dconv_checkpoint,
            &flow_checkpoint,
            resolution,
            runs,
            warmup,
            qp,
            frames,
            seed,
            &out,
        ),
    }
}
