//! Guidance-to-image GAN with AdaIN style injection: generator,
//! patch discriminator, fixed random style extractor, losses, training and
//! synthesis.

mod checkpoint;
mod losses;
mod nets;
mod synth;
mod trainer;

pub use checkpoint::{GanCheckpoint, CHECKPOINT_MAGIC};
pub use losses::{
    adversarial_registry, build_adversarial, content_loss, discriminator_loss, gan_losses,
    generator_loss, style_layer_losses, style_loss, AdversarialLoss, GanLosses, LeastSquares,
    LossComponents, Logistic,
};
pub use nets::{
    AdainSite, BlockInfo, BlockKind, Discriminator, GenForward, Generator, GeneratorArch,
    StyleExtractor,
};
pub use synth::{synthesize, SynthesisRecord};
pub use trainer::{train_gan, GanItem, GanTrainer, StepLog, TrainedGan};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::OptimizerConfig;
use crate::volumes::HuWindow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub adv: f64,
    pub style: f64,
    pub content: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            style: 1.0,
            content: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub image_size: usize,
    pub channels: usize,
    pub encoder_widths: Vec<usize>,
    pub n_resblocks: usize,
    pub disc_widths: Vec<usize>,
    pub weights: LossWeights,
    /// Registry name of the adversarial objective: `"lsgan"` or `"bce"`.
    pub adversarial: String,
    pub batch_size: usize,
    pub steps: usize,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
    pub seed: u64,
    pub extractor_seed: u64,
    pub window: HuWindow,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 4,
            encoder_widths: vec![32, 64],
            n_resblocks: 3,
            disc_widths: vec![32, 64, 128],
            weights: LossWeights::default(),
            adversarial: "lsgan".into(),
            batch_size: 1,
            steps: 2000,
            g_optimizer: OptimizerConfig::adam(1e-3, 0.5, 0.999),
            d_optimizer: OptimizerConfig::adam(2e-4, 0.5, 0.999),
            seed: 0,
            extractor_seed: 7,
            window: HuWindow::default(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.adv, w.style, w.content].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("gan: loss weights must be >= 0".into()));
        }
        if w.adv + w.style + w.content <= 0.0 {
            return Err(Error::Config("gan: at least one loss weight must be > 0".into()));
        }
        let scale = 1usize << self.encoder_widths.len().max(self.disc_widths.len());
        if self.image_size == 0 || self.image_size % scale != 0 {
            return Err(Error::Config(format!(
                "gan: image_size {} must be a positive multiple of {scale}",
                self.image_size
            )));
        }
        if self.channels == 0
            || self.encoder_widths.is_empty()
            || self.disc_widths.is_empty()
            || self.encoder_widths.contains(&0)
            || self.disc_widths.contains(&0)
        {
            return Err(Error::Config("gan: channel counts and widths must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("gan: batch_size must be >= 1".into()));
        }
        self.window.validate()?;
        build_adversarial(&self.adversarial)?;
        Ok(())
    }

    pub fn arch(&self) -> GeneratorArch {
        GeneratorArch {
            channels: self.channels,
            encoder_widths: self.encoder_widths.clone(),
            n_resblocks: self.n_resblocks,
        }
    }
}
