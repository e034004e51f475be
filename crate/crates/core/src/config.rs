//! Resolved run configuration: defaults, a JSON overlay file, and flag
//! overrides, hashed into the run directory name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{CohortConfig, SplitConfig, SubtypeConfig};
use crate::downstream::DownstreamConfig;
use crate::error::{Error, Result};
use crate::mrl::{EncoderConfig, FusionConfig, MrlConfig};
use crate::util::{content_hash, read_to_string};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cohort: CohortConfig,
    pub subtypes: SubtypeConfig,
    pub split: SplitConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Includes the feature extraction settings.
    pub mrl: MrlConfig,
    pub downstream: DownstreamConfig,
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    /// Laptop-scale settings: short sessions, a small encoder and fused
    /// dimension, K = 64 and a few hundred downstream epochs.
    pub fn desk() -> Self {
        let mut c = RunConfig {
            seed: 7,
            ..Default::default()
        };
        c.data.cohort.duration_s = (110.0, 250.0);
        c.mrl.encoder = EncoderConfig {
            strided_channels: vec![8, 16],
            residual_hidden: 8,
            projection_channels: 8,
            latent_dim: 64,
            ..Default::default()
        };
        c.mrl.fusion = FusionConfig {
            rank: 4,
            chunk: 16,
            core_out: 16,
            output_dim: 8,
            normalize: false,
        };
        c.mrl.codebook.entries = 64;
        c.mrl.training.epochs = 30;
        c.mrl.training.lr = 1e-3;
        c.mrl.training.batch_size = 16;
        c.downstream.conv_channels = 32;
        c.downstream.trunk_dim = 32;
        c.downstream.epochs = 300;
        c.downstream.lr = 1e-3;
        c.downstream.batch_size = 16;
        c
    }

    /// Applies a JSON overlay onto `self`. Unknown keys are rejected.
    pub fn overlay(&self, patch: Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, patch);
        let c: RunConfig = serde_json::from_value(base).map_err(|e| Error::validation(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads an overlay file onto the defaults. A top-level `"preset": "desk"`
    /// starts from [`RunConfig::desk`] instead.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut v: Value =
            serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        let base = match v.as_object_mut().and_then(|o| o.remove("preset")) {
            None => RunConfig::default(),
            Some(Value::String(p)) if p == "desk" => RunConfig::desk(),
            Some(Value::String(p)) if p == "default" => RunConfig::default(),
            Some(other) => return Err(Error::validation(format!("{}: unknown preset {other}", path.display()))),
        };
        base.overlay(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.cohort.validate()?;
        self.data.subtypes.validate()?;
        self.mrl.validate()?;
        self.downstream.validate()?;
        let (fa, fv) = (self.mrl.features.audio_rate_hz, self.mrl.features.video_rate_hz);
        if fa != self.data.cohort.audio_rate_hz || fv != self.data.cohort.video_rate_hz {
            return Err(Error::validation(format!(
                "cohort rates {}/{} Hz differ from feature rates {fa}/{fv} Hz",
                self.data.cohort.audio_rate_hz, self.data.cohort.video_rate_hz
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    /// Run directory name: `run-` and the first 12 hex digits of the hash.
    pub fn run_name(&self) -> String {
        format!("run-{}", &self.hash()[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overlay_merges_nested_and_rejects_unknown() {
        let c = RunConfig::default()
            .overlay(json!({"seed": 3, "mrl": {"codebook": {"entries": 64}}}))
            .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.mrl.codebook.entries, 64);
        assert_eq!(c.mrl.codebook.beta, 0.25);
        assert!(RunConfig::default().overlay(json!({"mrl": {"bogus": 1}})).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.run_name(), b.run_name());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        a.validate().unwrap();
        RunConfig::default().validate().unwrap();
    }
}
