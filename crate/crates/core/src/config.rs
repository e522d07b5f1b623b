//! Architecture and experiment configuration. Paper-scale defaults; the
//! `desk()` constructors give CPU-friendly widths for tests and small runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::QP_SET;

/// Number of QP-modulated residual blocks in the enhancement module.
pub const RES_BLOCKS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignBackend {
    DConv,
    Flow,
}

impl std::str::FromStr for AlignBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dconv" => Ok(AlignBackend::DConv),
            "flow" => Ok(AlignBackend::Flow),
            other => Err(Error::Config(format!(
                "unknown alignment backend {other:?}; expected dconv or flow"
            ))),
        }
    }
}

impl std::fmt::Display for AlignBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlignBackend::DConv => write!(f, "dconv"),
            AlignBackend::Flow => write!(f, "flow"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// QPs the one-hot conditioning accepts.
    pub qp_set: Vec<u8>,
    /// U-Net down/up steps in the offset predictor.
    pub unet_levels: usize,
    /// U-Net channels at full resolution (doubled per level).
    pub unet_base: usize,
    /// Kernel size of the zero-initialized offset head.
    pub offset_head_kernel: usize,
    /// Channels of the aligned representation (C_a).
    pub aligned_channels: usize,
    /// Encoder channels at full resolution; doubled by each of the two
    /// stride-2 stages, so the residual trunk runs at 4x this width.
    pub enc_base: usize,
    /// Kernel size of the first encoder convolution.
    pub enc_kernel: usize,
    /// Share one QP embedding layer across all residual blocks instead of
    /// one per block.
    pub share_fc: bool,
    /// Apply the QP scales before batch norm inside the residual block
    /// (default is conv -> BN -> scale -> ReLU).
    pub modulate_before_bn: bool,
    /// Add the center input frame to the output before squashing.
    pub global_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            qp_set: QP_SET.to_vec(),
            unet_levels: 3,
            unet_base: 32,
            offset_head_kernel: 3,
            aligned_channels: 64,
            enc_base: 64,
            enc_kernel: 7,
            share_fc: false,
            modulate_before_bn: false,
            global_skip: false,
        }
    }
}

impl GeneratorConfig {
    /// CPU-friendly widths for desk-scale experiments.
    pub fn desk() -> Self {
        GeneratorConfig {
            unet_levels: 2,
            unet_base: 8,
            offset_head_kernel: 1,
            aligned_channels: 16,
            enc_base: 12,
            enc_kernel: 3,
            ..Default::default()
        }
    }

    /// Channel count of the residual trunk (C_r).
    pub fn trunk_channels(&self) -> usize {
        self.enc_base * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.qp_set.is_empty() {
            return Err(Error::Config("qp_set must not be empty".into()));
        }
        for &qp in &self.qp_set {
            if !QP_SET.contains(&qp) {
                return Err(Error::Config(format!(
                    "qp {qp} not in the supported set {QP_SET:?}"
                )));
            }
        }
        if self.unet_levels == 0 || self.unet_base == 0 || self.aligned_channels == 0 || self.enc_base == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        if self.offset_head_kernel % 2 == 0 || self.enc_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// First-layer channels; later layers double up to 8x.
    pub base: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base: 64 }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig { base: 8 }
    }
}

/// Configuration of the fixed 19-layer feature extractor behind the
/// perceptual loss and the perceptual-distance metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Stage-1 width; the classic pretrained network uses 64.
    pub base: usize,
    /// Conv-layer indices (0..16) whose post-ReLU activations are compared.
    pub layer_ids: Vec<usize>,
    /// Seed for the random fallback weights when no weight file is given.
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            base: 64,
            // after each conv stage: relu1_2, relu2_2, relu3_4, relu4_4, relu5_4
            layer_ids: vec![1, 3, 7, 11, 15],
            seed: 0x5eed,
        }
    }
}

impl ExtractorConfig {
    pub fn desk() -> Self {
        ExtractorConfig {
            base: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_ids.is_empty() {
            return Err(Error::Config("extractor needs at least one tap layer".into()));
        }
        if !self.layer_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("extractor layer_ids must be strictly increasing".into()));
        }
        if *self.layer_ids.last().unwrap() > 15 {
            return Err(Error::Config("extractor layer_ids must be < 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Pyramid levels.
    pub levels: usize,
    /// Warping refinements per level.
    pub iters: usize,
    /// Relaxation sweeps per refinement.
    pub sweeps: usize,
    /// Smoothness weight of the variational solver.
    pub alpha: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            levels: 3,
            iters: 3,
            sweeps: 80,
            alpha: 0.1,
        }
    }
}

/// Everything needed to rebuild the networks of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ArchConfig {
    pub backend: Option<AlignBackendField>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
    pub flow: FlowConfig,
}

/// Wrapper so TOML/JSON can omit the backend (defaults to dconv).
pub type AlignBackendField = AlignBackend;

impl ArchConfig {
    pub fn desk() -> Self {
        ArchConfig {
            backend: Some(AlignBackend::DConv),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            extractor: ExtractorConfig::desk(),
            flow: FlowConfig::default(),
        }
    }

    pub fn backend(&self) -> AlignBackend {
        self.backend.unwrap_or(AlignBackend::DConv)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.extractor.validate()?;
        if self.discriminator.base == 0 {
            return Err(Error::Config("discriminator base width must be positive".into()));
        }
        if self.flow.levels == 0 || self.flow.iters == 0 {
            return Err(Error::Config("flow estimator needs at least one level and iteration".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ArchConfig::default().validate().unwrap();
        ArchConfig::desk().validate().unwrap();
    }

    #[test]
    fn qp_outside_supported_set_rejected() {
        let mut cfg = GeneratorConfig::default();
        cfg.qp_set = vec![22, 30];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ArchConfig::desk();
        let s = toml::to_string(&cfg).unwrap();
        let back: ArchConfig = toml::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}
