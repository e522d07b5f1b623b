//! Alternating G/D optimization with seeded reproducibility, CSV loss
//! logging and bit-exact checkpoint resume.

mod checkpoint;

pub use checkpoint::Container;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ArchConfig;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::frame::{LumaFrame, QpCode, TrainingSample, QP_SET};
use crate::generator::{codes_to_tensor, Generator};
use crate::losses::{
    fm_loss, fm_loss_backward, gan_loss_d, gan_loss_d_backward, gan_loss_g, gan_loss_g_backward, total_g_loss,
    vgg_loss_with_grad, FeatureExtractor, LossReport,
};
use crate::metrics::psnr;
use crate::nn::{Adam, AdamConfig, Grads, Mode, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub seed: u64,
    /// QPs mixed into training batches (subset of the supported set).
    pub qp_set: Vec<u8>,
    pub patch: usize,
    pub checkpoint_every: u64,
    /// Objective weights; the printed objective uses unit weights.
    pub w_gan: f64,
    pub w_vgg: f64,
    pub w_fm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 10_000,
            seed: 0,
            qp_set: QP_SET.to_vec(),
            patch: 128,
            checkpoint_every: 500,
            w_gan: 1.0,
            w_vgg: 1.0,
            w_fm: 1.0,
        }
    }
}

impl TrainingConfig {
    /// Desk-scale defaults for CI and CPU runs.
    pub fn desk() -> Self {
        TrainingConfig {
            batch_size: 8,
            patch: 64,
            steps: 2000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if self.qp_set.is_empty() {
            return Err(Error::Config("qp_set must not be empty".into()));
        }
        for &qp in &self.qp_set {
            if !QP_SET.contains(&qp) {
                return Err(Error::Config(format!("qp {qp} not in supported set {QP_SET:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding one `qp{N}.vqes` sample archive per trained QP.
    pub dataset_dir: Option<PathBuf>,
    /// Optional external extractor weight file.
    pub vgg_weights: Option<PathBuf>,
}

/// One experiment: training settings, architecture, data locations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub training: TrainingConfig,
    pub arch: ArchConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.training.validate()?;
        cfg.arch.validate()?;
        Ok(cfg)
    }
}

/// Training driver owning both networks, their optimizers, the frozen
/// feature extractor and the batch scheduler.
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub arch: ArchConfig,
    pub gen: Generator,
    pub gen_params: Params<f32>,
    pub disc: Discriminator,
    pub disc_params: Params<f32>,
    pub extractor: FeatureExtractor,
    pub ext_params: Params<f32>,
    adam_g: Adam<f32>,
    adam_d: Adam<f32>,
    rng: ChaCha8Rng,
    pub step: u64,
    order: Vec<u32>,
    cursor: usize,
    vgg_weights: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainingConfig, arch: ArchConfig) -> Result<Self> {
        Self::with_vgg_weights(cfg, arch, None)
    }

    pub fn with_vgg_weights(cfg: TrainingConfig, arch: ArchConfig, vgg_weights: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        arch.validate()?;
        for qp in &cfg.qp_set {
            if !arch.generator.qp_set.contains(qp) {
                return Err(Error::Config(format!(
                    "training qp {qp} outside the generator's set {:?}",
                    arch.generator.qp_set
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gen_params = Params::<f32>::new();
        let gen = Generator::new(&mut gen_params, &mut rng, &arch.generator, arch.backend(), &arch.flow);
        let mut disc_params = Params::<f32>::new();
        let disc = Discriminator::new(&mut disc_params, &mut rng, &arch.discriminator);
        let mut ext_params = Params::<f32>::new();
        let extractor = FeatureExtractor::new(&mut ext_params, &arch.extractor)?;
        if let Some(path) = vgg_weights {
            let c = Container::load(path)?;
            extractor.load_weights(&mut ext_params, &c.tensors)?;
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        Ok(Trainer {
            adam_g: Adam::new(adam, &gen_params),
            adam_d: Adam::new(adam, &disc_params),
            cfg,
            arch,
            gen,
            gen_params,
            disc,
            disc_params,
            extractor,
            ext_params,
            rng,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            vgg_weights: vgg_weights.map(Path::to_path_buf),
        })
    }

    /// Indices of the next seeded-shuffled batch over a dataset of
    /// `dataset_len` samples.
    pub fn next_batch_indices(&mut self, dataset_len: usize) -> Vec<usize> {
        assert!(dataset_len > 0, "empty dataset");
        if self.order.len() != dataset_len {
            self.order = (0..dataset_len as u32).collect();
            self.cursor = dataset_len; // force a reshuffle
        }
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                for i in (1..self.order.len()).rev() {
                    let j = self.rng.random_range(0..=i);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor] as usize);
            self.cursor += 1;
        }
        out
    }

    /// One alternating optimization step: D on real-vs-detached-fake,
    /// then G on the adversarial, perceptual and feature-matching terms.
    pub fn train_step(&mut self, batch: &[&TrainingSample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let (h, w) = (batch[0].target.height(), batch[0].target.width());
        if batch.iter().any(|s| (s.target.height(), s.target.width()) != (h, w)) {
            return Err(Error::shape("batch samples must share patch dimensions"));
        }

        let triplets: Vec<&crate::frame::FrameTriplet> = batch.iter().map(|s| &s.degraded).collect();
        let frames = crate::align::triplets_to_tensor::<f32>(&triplets);
        let codes: Vec<QpCode> = batch.iter().map(|s| s.qp).collect();
        let codes = codes_to_tensor::<f32>(&codes);
        let mut targets = Array4::<f32>::zeros((batch.len(), 1, h, w));
        for (ni, s) in batch.iter().enumerate() {
            let mut lane = targets.slice_mut(ndarray::s![ni, 0, .., ..]);
            ndarray::Zip::from(&mut lane).and(s.target.pixels()).for_each(|o, &v| *o = v);
        }

        // single generator forward serves the D update (detached) and the
        // G update (with gradients)
        let (x_hat, g_cache) = self.gen.forward(&self.gen_params, &frames, &codes, Mode::Train);

        // --- discriminator update ---
        let (map_real, _, d_cache_real) = self.disc.forward(&self.disc_params, &targets)?;
        let (map_fake, _, d_cache_fake) = self.disc.forward(&self.disc_params, &x_hat)?;
        let l_gan_d = gan_loss_d(&map_real, &map_fake) as f64;
        {
            let (d_real, d_fake) = gan_loss_d_backward(&map_real, &map_fake);
            let mut grads_d = Grads::new(&self.disc_params);
            self.disc
                .backward(&self.disc_params, &d_cache_real, &d_real, None, Some(&mut grads_d));
            self.disc
                .backward(&self.disc_params, &d_cache_fake, &d_fake, None, Some(&mut grads_d));
            self.adam_d.step(&mut self.disc_params, &grads_d);
        }

        // --- generator update (against the updated discriminator) ---
        let (map_fake2, feats_fake, d_cache_fake2) = self.disc.forward(&self.disc_params, &x_hat)?;
        let (_, feats_real, _) = self.disc.forward(&self.disc_params, &targets)?;

        let l_gan_g = gan_loss_g(&map_fake2) as f64;
        let l_fm = fm_loss(&feats_real, &feats_fake)? as f64;
        let (l_vgg32, d_xhat_vgg) =
            vgg_loss_with_grad(&self.extractor, &self.ext_params, &targets, &x_hat)?;
        let l_vgg = l_vgg32 as f64;

        let total_g = total_g_loss(self.cfg.w_gan * l_gan_g, self.cfg.w_vgg * l_vgg, self.cfg.w_fm * l_fm)
            .map_err(|e| match e {
                Error::NonFiniteLoss { term } => Error::TrainingDiverged { step: self.step, term },
                other => other,
            })?;

        let report = LossReport {
            l_gan_g,
            l_gan_d,
            l_vgg,
            l_fm,
            total_g,
        };
        if !report.is_finite() || !l_gan_d.is_finite() {
            return Err(Error::TrainingDiverged {
                step: self.step,
                term: "loss report".into(),
            });
        }

        {
            let w_gan = self.cfg.w_gan as f32;
            let w_fm = self.cfg.w_fm as f32;
            let w_vgg = self.cfg.w_vgg as f32;
            let d_scores = gan_loss_g_backward(&map_fake2).mapv(|v| v * w_gan);
            let d_feats: Vec<Array4<f32>> = fm_loss_backward(&feats_real, &feats_fake)
                .into_iter()
                .map(|g| g.mapv(|v| v * w_fm))
                .collect();
            let d_xhat_disc = self
                .disc
                .backward(&self.disc_params, &d_cache_fake2, &d_scores, Some(&d_feats), None);
            let d_xhat = d_xhat_disc + &d_xhat_vgg.mapv(|v| v * w_vgg);

            let mut grads_g = Grads::new(&self.gen_params);
            self.gen.backward(&self.gen_params, &g_cache, &d_xhat, Some(&mut grads_g));
            self.adam_g.step(&mut self.gen_params, &grads_g);
            self.gen.update_running(&mut self.gen_params, &g_cache);
        }

        self.step += 1;
        Ok(report)
    }

    /// Enhance one sample at inference settings.
    pub fn enhance_sample(&self, s: &TrainingSample) -> Result<LumaFrame> {
        self.gen.generate::<f32>(&self.gen_params, &s.degraded, s.qp.qp())
    }

    /// Mean PSNR of enhanced-vs-target and degraded-vs-target over samples.
    pub fn psnr_against_targets(&self, samples: &[TrainingSample]) -> Result<(f64, f64)> {
        let mut enhanced = 0.0;
        let mut degraded = 0.0;
        for s in samples {
            let e = self.enhance_sample(s)?;
            enhanced += psnr(&e, &s.target)?;
            degraded += psnr(&s.degraded.curr, &s.target)?;
        }
        let n = samples.len() as f64;
        Ok((enhanced / n, degraded / n))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "step": self.step,
            "training": self.cfg,
            "arch": self.arch,
            "rng_seed": hex_encode(&self.rng.get_seed()),
            "rng_word_pos": self.rng.get_word_pos().to_string(),
            "order": self.order,
            "cursor": self.cursor,
            "adam_g_t": self.adam_g.t,
            "adam_d_t": self.adam_d.t,
            "vgg_weights": self.vgg_weights.as_ref().map(|p| p.display().to_string()),
        });
        let mut c = Container::new("checkpoint", meta);
        c.push_params("g.", &self.gen_params);
        c.push_params("d.", &self.disc_params);
        let push_moments = |c: &mut Container, prefix: &str, params: &Params<f32>, adam: &Adam<f32>| {
            let (_, ms, vs) = adam.state(params);
            for ((name, _, _), (m, v)) in params.iter().zip(ms.iter().zip(vs.iter())) {
                c.push_tensor(format!("{prefix}.m.{name}"), m.shape().to_vec(), m.iter().copied().collect());
                c.push_tensor(format!("{prefix}.v.{name}"), v.shape().to_vec(), v.iter().copied().collect());
            }
        };
        push_moments(&mut c, "adam_g", &self.gen_params, &self.adam_g);
        push_moments(&mut c, "adam_d", &self.disc_params, &self.adam_d);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "checkpoint" {
            return Err(Error::Checkpoint(format!("container kind {:?} is not a checkpoint", c.kind)));
        }
        let meta = &c.meta;
        let cfg: TrainingConfig = serde_json::from_value(meta["training"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad training config: {e}")))?;
        let arch: ArchConfig = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad arch config: {e}")))?;
        let vgg_weights: Option<PathBuf> = meta["vgg_weights"].as_str().map(PathBuf::from);
        let mut t = Trainer::with_vgg_weights(cfg, arch, vgg_weights.as_deref())?;

        c.load_params("g.", &mut t.gen_params)?;
        c.load_params("d.", &mut t.disc_params)?;

        t.step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        let seed_hex = meta["rng_seed"].as_str().ok_or_else(|| Error::Checkpoint("missing rng_seed".into()))?;
        let seed = hex_decode(seed_hex)?;
        let word_pos: u128 = meta["rng_word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing rng_word_pos".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        t.rng = rng;
        t.order = serde_json::from_value(meta["order"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad order: {e}")))?;
        t.cursor = meta["cursor"].as_u64().unwrap_or(0) as usize;

        let load_adam = |prefix: &str, params: &Params<f32>, t_steps: u64| -> Result<Adam<f32>> {
            let mut adam = Adam::new(
                AdamConfig {
                    lr: t.cfg.lr,
                    beta1: t.cfg.beta1,
                    beta2: t.cfg.beta2,
                    eps: t.cfg.eps,
                },
                params,
            );
            let mut ms = Vec::new();
            let mut vs = Vec::new();
            for id in params.ids().collect::<Vec<_>>() {
                let name = params.name(id);
                for (kind, sink) in [("m", &mut ms), ("v", &mut vs)] {
                    let key = format!("{prefix}.{kind}.{name}");
                    let Some((_, shape, data)) = c.find(&key) else {
                        return Err(Error::Checkpoint(format!("missing optimizer tensor {key}")));
                    };
                    sink.push(
                        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data.clone()).unwrap(),
                    );
                }
            }
            adam.restore(t_steps, ms, vs);
            Ok(adam)
        };
        t.adam_g = load_adam("adam_g", &t.gen_params, meta["adam_g_t"].as_u64().unwrap_or(0))?;
        t.adam_d = load_adam("adam_d", &t.disc_params, meta["adam_d_t"].as_u64().unwrap_or(0))?;
        Ok(t)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Checkpoint("rng seed must be 32 bytes".into()));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks_exact(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16).ok_or_else(|| Error::Checkpoint("bad hex".into()))?;
        let lo = (chunk[1] as char).to_digit(16).ok_or_else(|| Error::Checkpoint("bad hex".into()))?;
        out[i] = (hi * 16 + lo) as u8;
    }
    Ok(out)
}

/// CSV header of the loss log.
pub const LOSS_LOG_HEADER: &str = "step,l_gan_g,l_gan_d,l_vgg,l_fm,total_g";

pub fn loss_log_row(step: u64, r: &LossReport) -> String {
    format!(
        "{step},{},{},{},{},{}",
        r.l_gan_g, r.l_gan_d, r.l_vgg, r.l_fm, r.total_g
    )
}

/// Outcome of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps_run: u64,
}

/// Load the per-QP sample archives for every QP in the config.
pub fn load_dataset(cfg: &TrainingConfig, dataset_dir: &Path) -> Result<Vec<TrainingSample>> {
    let mut all = Vec::new();
    for &qp in &cfg.qp_set {
        let path = dataset_dir.join(format!("qp{qp}.vqes"));
        if !path.exists() {
            return Err(Error::Config(format!(
                "dataset split for qp {qp} missing: {}",
                path.display()
            )));
        }
        all.extend(crate::frame::read_samples(&path)?);
    }
    if all.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    Ok(all)
}

/// Run (or resume) training to `cfg.steps`, writing periodic checkpoints
/// and a loss-log CSV under `out_dir`.
pub fn train(mut trainer: Trainer, dataset: &[TrainingSample], out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("loss_log.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "{LOSS_LOG_HEADER}")?;

    let ckpt_path = out_dir.join("checkpoint.vqec");
    if trainer.cfg.steps == 0 || trainer.step >= trainer.cfg.steps {
        trainer.save(&ckpt_path)?;
        log.flush()?;
        return Ok(TrainOutcome {
            checkpoint: ckpt_path,
            loss_log: log_path,
            steps_run: 0,
        });
    }

    let mut steps_run = 0;
    while trainer.step < trainer.cfg.steps {
        let idx = trainer.next_batch_indices(dataset.len());
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &dataset[i]).collect();
        let report = trainer.train_step(&batch)?;
        writeln!(log, "{}", loss_log_row(trainer.step, &report))?;
        steps_run += 1;
        if trainer.cfg.checkpoint_every > 0 && trainer.step % trainer.cfg.checkpoint_every == 0 {
            trainer.save(&out_dir.join(format!("checkpoint_step{}.vqec", trainer.step)))?;
        }
    }
    trainer.save(&ckpt_path)?;
    log.flush()?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        loss_log: log_path,
        steps_run,
    })
}
