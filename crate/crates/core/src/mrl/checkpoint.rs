use std::path::Path;

use mmvq_autodiff::{Container, EntryData, Tensor};
use serde::{Deserialize, Serialize};

use super::model::{Batch, MrlModel};
use super::train::EpochRecord;
use super::MrlConfig;
use crate::error::{Error, Result};
use crate::util::module_rng;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: MrlConfig,
    config_hash: String,
    selected_epoch: usize,
    history: Vec<EpochRecord>,
}

/// A trained MRL model plus its provenance.
#[derive(Clone, Debug)]
pub struct MrlCheckpoint {
    pub model: MrlModel<f32>,
    pub config_hash: String,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl MrlCheckpoint {
    pub fn new(model: MrlModel<f32>, selected_epoch: usize, history: Vec<EpochRecord>) -> Self {
        Self {
            config_hash: model.config.hash(),
            model,
            selected_epoch,
            history,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = Meta {
            config: self.model.config.clone(),
            config_hash: self.config_hash.clone(),
            selected_epoch: self.selected_epoch,
            history: self.history.clone(),
        };
        let mut c = Container::new();
        c.insert("meta", EntryData::Bytes(serde_json::to_vec(&meta)?));
        c.insert_params("param/", &self.model.store);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_container()?.to_bytes()?)
    }

    /// Loads a checkpoint. With `expected_hash`, a different config hash is
    /// rejected.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let c = Container::read(path)?;
        let meta: Meta = serde_json::from_slice(c.bytes("meta")?)?;
        let recomputed = meta.config.hash();
        if recomputed != meta.config_hash {
            return Err(Error::HashMismatch {
                expected: recomputed,
                found: meta.config_hash,
            });
        }
        if let Some(want) = expected_hash {
            if want != meta.config_hash {
                return Err(Error::HashMismatch {
                    expected: want.to_string(),
                    found: meta.config_hash,
                });
            }
        }
        let mut model = MrlModel::<f32>::new(&meta.config, &mut module_rng(0, "mrl.load"))?;
        c.load_params("param/", &mut model.store)?;
        Ok(Self {
            model,
            config_hash: meta.config_hash,
            selected_epoch: meta.selected_epoch,
            history: meta.history,
        })
    }

    /// Quantized fused latent of one segment: exactly one codebook row.
    pub fn embed_segment(&self, audio: &Tensor<f32>, video: &Tensor<f32>) -> Result<Vec<f32>> {
        let (_, zq) = self.model.embed(&Batch::stack(&[audio], &[video])?)?;
        Ok(zq.into_data())
    }

    /// Batched embedding; returns codebook indices and `[N, L]` rows.
    pub fn embed_many(&self, audio: &[&Tensor<f32>], video: &[&Tensor<f32>]) -> Result<(Vec<usize>, Tensor<f32>)> {
        self.model.embed(&Batch::stack(audio, video)?)
    }
}
