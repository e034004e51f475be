//! Multimodal VQ-VAE: per-modality CNN encoders, BLOCK fusion, a shared
//! codebook and mirrored decoders.

mod checkpoint;
mod model;
mod quantize;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::util::content_hash;

pub use checkpoint::MrlCheckpoint;
pub use model::{block_fuse_reference, Batch, LossParts, LossVars, MrlModel};
pub use quantize::{nearest_index, quantize_vector, QuantMode, Quantized};
pub use train::{train_mrl, EpochRecord, MrlDataset, SegmentPair, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub strided_channels: Vec<usize>,
    pub strided_kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub residual_blocks: usize,
    pub residual_hidden: usize,
    pub residual_kernel: usize,
    pub projection_channels: usize,
    /// Unimodal latent size.
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            strided_channels: vec![32, 64],
            strided_kernel: 4,
            stride: 2,
            padding: 1,
            residual_blocks: 2,
            residual_hidden: 32,
            residual_kernel: 3,
            projection_channels: 32,
            latent_dim: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of blocks `R`.
    pub rank: usize,
    /// Chunk size `c` of each projected input block.
    pub chunk: usize,
    /// Output size `c'` of each core tensor.
    pub core_out: usize,
    /// Fused latent size `L` (also the codebook entry size).
    pub output_dim: usize,
    /// Signed square root and L2 normalization after the bilinear blocks.
    pub normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            chunk: 32,
            core_out: 64,
            output_dim: 1024,
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub entries: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            entries: 1024,
            beta: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectOn {
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrlTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub select_on: SelectOn,
}

impl Default for MrlTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            batch_size: 32,
            select_on: SelectOn::Val,
        }
    }
}

/// Everything that determines an MRL model; hashed into its checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrlConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub codebook: CodebookConfig,
    pub training: MrlTrainConfig,
}

impl MrlConfig {
    pub fn hash(&self) -> String {
        content_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        let e = &self.encoder;
        if e.strided_channels.is_empty() || e.strided_channels.contains(&0) {
            return Err(Error::validation("encoder needs at least one non-empty strided layer"));
        }
        if e.stride == 0 || e.strided_kernel == 0 || e.residual_kernel.is_multiple_of(2) {
            return Err(Error::validation(
                "encoder stride and kernel must be positive and the residual kernel odd",
            ));
        }
        if e.latent_dim == 0 || e.projection_channels == 0 || e.residual_hidden == 0 {
            return Err(Error::validation("encoder sizes must be positive"));
        }
        let f = &self.fusion;
        if f.rank == 0 || f.chunk == 0 || f.core_out == 0 || f.output_dim == 0 {
            return Err(Error::validation("fusion sizes must be positive"));
        }
        if self.codebook.entries < 2 {
            return Err(Error::validation("codebook needs at least 2 entries"));
        }
        if self.codebook.beta < 0.0 {
            return Err(Error::validation("commitment weight must be non-negative"));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.lr < 0.0 {
            return Err(Error::validation("training needs batch_size ≥ 1 and lr ≥ 0"));
        }
        Ok(())
    }

    /// Small model used by the composed gradient check.
    pub fn tiny() -> Self {
        Self {
            features: FeatureConfig {
                audio_channels: (0..3).map(|i| format!("a{i}")).collect(),
                video_channels: (0..3).map(|i| format!("v{i}")).collect(),
                audio_delays: vec![0, 1],
                video_delays: vec![0, 1],
                ..FeatureConfig::default()
            },
            encoder: EncoderConfig {
                strided_channels: vec![2, 3],
                strided_kernel: 3,
                stride: 2,
                padding: 1,
                residual_blocks: 1,
                residual_hidden: 2,
                residual_kernel: 3,
                projection_channels: 2,
                latent_dim: 4,
            },
            fusion: FusionConfig {
                rank: 2,
                chunk: 2,
                core_out: 3,
                output_dim: 6,
                normalize: false,
            },
            codebook: CodebookConfig { entries: 5, beta: 0.25 },
            training: MrlTrainConfig::default(),
        }
    }
}
