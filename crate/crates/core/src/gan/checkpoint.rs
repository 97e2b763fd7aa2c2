use std::path::Path;

use super::nets::{Discriminator, Generator};
use super::GanConfig;
use crate::error::{Error, Result};
use crate::format::{f64_from_le, f64_to_le, join_list, read_file, write_file, Header};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "CS2CKP1";

/// Generator and discriminator parameters plus the config that shaped them.
#[derive(Clone, Debug)]
pub struct GanCheckpoint {
    pub config: GanConfig,
    pub step: usize,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

fn shape_list(p: &ParamStore) -> String {
    let dims: Vec<String> = p
        .tensors()
        .iter()
        .map(|t| t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
        .collect();
    join_list(&dims)
}

impl GanCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_string(&self.config)
            .map_err(|e| Error::Config(format!("cannot serialize GAN config: {e}")))?;
        let mut hd = Header::new(CHECKPOINT_MAGIC);
        hd.set("config", cfg)
            .set("step", self.step)
            .set("g_names", join_list(self.generator.params.names()))
            .set("g_shapes", shape_list(&self.generator.params))
            .set("d_names", join_list(self.discriminator.params.names()))
            .set("d_shapes", shape_list(&self.discriminator.params));
        let values: Vec<f64> = self
            .generator
            .params
            .tensors()
            .iter()
            .chain(self.discriminator.params.tensors())
            .flat_map(|t| t.data().iter().copied())
            .collect();
        Ok(hd.encode(&f64_to_le(&values)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hd, payload) = Header::decode(bytes, CHECKPOINT_MAGIC)?;
        let config: GanConfig = serde_json::from_str(hd.require("config")?)
            .map_err(|e| Error::MalformedHeader(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let mut generator = Generator::new(config.arch(), 0)?;
        let mut discriminator = Discriminator::new(config.channels, &config.disc_widths, 0)?;
        for (key, store) in [("g", &generator.params), ("d", &discriminator.params)] {
            let names = hd.require(&format!("{key}_names"))?;
            let shapes = hd.require(&format!("{key}_shapes"))?;
            if names != join_list(store.names()) || shapes != shape_list(store) {
                return Err(Error::CheckpointMismatch(format!(
                    "stored {key} parameters do not match the architecture in the stored config"
                )));
            }
        }
        let total = generator.params.numel() + discriminator.params.numel();
        let flat = f64_from_le(payload, total)?;
        let mut offset = 0;
        for store in [&mut generator.params, &mut discriminator.params] {
            let mut values = Vec::with_capacity(store.len());
            for t in store.tensors() {
                let n = t.len();
                values.push(Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
                offset += n;
            }
            store.load_values(values)?;
        }
        Ok(Self {
            step: hd.parse("step")?,
            config,
            generator,
            discriminator,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Errors when `cfg` describes a different network than this checkpoint.
    pub fn require_compatible(&self, cfg: &GanConfig) -> Result<()> {
        let mine = &self.config;
        let mut diffs = Vec::new();
        if mine.image_size != cfg.image_size {
            diffs.push(format!("image_size {} vs {}", mine.image_size, cfg.image_size));
        }
        if mine.channels != cfg.channels {
            diffs.push(format!("channels {} vs {}", mine.channels, cfg.channels));
        }
        if mine.encoder_widths != cfg.encoder_widths {
            diffs.push(format!("encoder_widths {:?} vs {:?}", mine.encoder_widths, cfg.encoder_widths));
        }
        if mine.n_resblocks != cfg.n_resblocks {
            diffs.push(format!("n_resblocks {} vs {}", mine.n_resblocks, cfg.n_resblocks));
        }
        if mine.disc_widths != cfg.disc_widths {
            diffs.push(format!("disc_widths {:?} vs {:?}", mine.disc_widths, cfg.disc_widths));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(format!(
                "checkpoint vs config: {}",
                diffs.join("; ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GanConfig {
        GanConfig {
            image_size: 16,
            channels: 2,
            encoder_widths: vec![4, 8],
            n_resblocks: 1,
            disc_widths: vec![4],
            ..Default::default()
        }
    }

    fn ckpt(cfg: &GanConfig) -> GanCheckpoint {
        GanCheckpoint {
            config: cfg.clone(),
            step: 12,
            generator: Generator::new(cfg.arch(), 3).unwrap(),
            discriminator: Discriminator::new(cfg.channels, &cfg.disc_widths, 4).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt(&small());
        let back = GanCheckpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, 12);
        assert_eq!(back.config, c.config);
        assert_eq!(back.generator.params.tensors(), c.generator.params.tensors());
        assert_eq!(back.discriminator.params.tensors(), c.discriminator.params.tensors());
    }

    #[test]
    fn mismatches_are_reported() {
        let c = ckpt(&small());
        let other = GanConfig {
            encoder_widths: vec![4, 16],
            ..small()
        };
        let err = c.require_compatible(&other).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
        assert!(err.to_string().contains("encoder_widths"));
        assert!(c.require_compatible(&small()).is_ok());

        let mut bytes = c.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(GanCheckpoint::from_bytes(&bytes).is_err());
    }
}
