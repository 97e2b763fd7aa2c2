//! Whole-pipeline run configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::format::{read_file, write_file};
use crate::gan::GanConfig;
use crate::maskgen::UnsupConfig;
use crate::phantom::PhantomSpec;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_phantoms: usize,
    /// Synthetic pairs produced per guidance input by `synth` and `infer`.
    pub synth_per_guidance: usize,
    /// Synthetic images labeled for ensemble training.
    pub n_labeled: usize,
    /// Connected-component cleanup threshold applied to predicted masks.
    pub min_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_phantoms: 200,
            synth_per_guidance: 4,
            n_labeled: 30,
            min_size: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; the defaults derive every stage seed from it.
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub phantom: PhantomSpec,
    pub maskgen: UnsupConfig,
    pub gan: GanConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            pipeline: PipelineConfig::default(),
            phantom: PhantomSpec::default(),
            maskgen: UnsupConfig::default(),
            gan: GanConfig::default(),
            ensemble: EnsembleConfig::default(),
        };
        cfg.reseed(seed);
        cfg
    }

    /// Sets the global seed and re-derives every stage seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = derive_seed(seed, "phantom");
        self.gan.seed = derive_seed(seed, "gan");
        self.ensemble.seed = derive_seed(seed, "ensemble");
    }

    /// Seed of the per-image clustering runs.
    pub fn maskgen_seed(&self) -> u64 {
        derive_seed(self.seed, "maskgen")
    }

    pub fn validate(&self) -> Result<()> {
        if self.pipeline.n_phantoms == 0 || self.pipeline.synth_per_guidance == 0 || self.pipeline.n_labeled == 0 {
            return Err(Error::Config(
                "pipeline: n_phantoms, synth_per_guidance and n_labeled must be >= 1".into(),
            ));
        }
        self.phantom.validate()?;
        self.maskgen.validate()?;
        self.gan.validate()?;
        self.ensemble.validate()?;
        if self.phantom.height != self.phantom.width || self.phantom.height != self.gan.image_size {
            return Err(Error::Config(format!(
                "phantom size {}x{} must be square and equal gan.image_size {}",
                self.phantom.height, self.phantom.width, self.gan.image_size
            )));
        }
        if self.gan.channels != 4 || self.ensemble.heads != 4 {
            return Err(Error::Config("gan.channels and ensemble.heads must equal the slab depth 4".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml()?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[gan.g_optimizer]"));
    }

    #[test]
    fn malformed_and_unknown_keys() {
        assert!(matches!(RunConfig::from_toml("seed = "), Err(Error::Config(_))));
        let mut text = RunConfig::default().to_toml().unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let mut bad = RunConfig::default();
        bad.gan.image_size = 32;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn stage_seeds_follow_global(seed in any::<u64>()) {
            let cfg = RunConfig::with_seed(seed);
            prop_assert_eq!(cfg.gan.seed, derive_seed(seed, "gan"));
            prop_assert_eq!(cfg.phantom.seed, derive_seed(seed, "phantom"));
            prop_assert_eq!(cfg.ensemble.seed, derive_seed(seed, "ensemble"));
            let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
