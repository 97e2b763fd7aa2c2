use serde::Serialize;

use super::nets::{Discriminator, StyleExtractor};
use super::LossWeights;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::registry::Registry;

/// Adversarial objective on a patch-logit map.
pub trait AdversarialLoss: Send + Sync {
    fn name(&self) -> &'static str;
    /// Loss pushing `logits` toward "real" (`true`) or "fake" (`false`).
    fn loss(&self, tape: &mut Tape, logits: Var, real: bool) -> Result<Var>;
}

/// Least-squares objective: mean of `(logit - target)^2`, targets 1 / 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct LeastSquares;

impl AdversarialLoss for LeastSquares {
    fn name(&self) -> &'static str {
        "lsgan"
    }

    fn loss(&self, tape: &mut Tape, logits: Var, real: bool) -> Result<Var> {
        let shape = tape.value(logits).shape().to_vec();
        let target = tape.leaf(Tensor::full(&shape, if real { 1.0 } else { 0.0 }));
        tape.mse(logits, target)
    }
}

/// Binary cross-entropy on logits.
#[derive(Clone, Copy, Debug, Default)]
pub struct Logistic;

impl AdversarialLoss for Logistic {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn loss(&self, tape: &mut Tape, logits: Var, real: bool) -> Result<Var> {
        // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
        let x = if real { tape.scale(logits, -1.0) } else { logits };
        let sp = tape.softplus(x);
        Ok(tape.mean(sp))
    }
}

fn lsgan(_: &()) -> Result<Box<dyn AdversarialLoss>> {
    Ok(Box::new(LeastSquares))
}

fn bce(_: &()) -> Result<Box<dyn AdversarialLoss>> {
    Ok(Box::new(Logistic))
}

pub fn adversarial_registry() -> Registry<dyn AdversarialLoss, ()> {
    Registry::new("adversarial loss")
        .with("lsgan", lsgan)
        .with("bce", bce)
}

pub fn build_adversarial(name: &str) -> Result<Box<dyn AdversarialLoss>> {
    adversarial_registry().create(name, &())
}

pub fn content_loss(tape: &mut Tape, synth: Var, guidance: Var) -> Result<Var> {
    tape.mse(synth, guidance)
}

/// Gram-matrix MSE per extractor layer.
pub fn style_layer_losses(
    tape: &mut Tape,
    extractor: &StyleExtractor,
    synth: Var,
    reference: Var,
) -> Result<Vec<Var>> {
    let fs = extractor.features(tape, synth)?;
    let fr = extractor.features(tape, reference)?;
    fs.into_iter()
        .zip(fr)
        .map(|(a, b)| {
            let ga = tape.gram(a)?;
            let gb = tape.gram(b)?;
            tape.mse(ga, gb)
        })
        .collect()
}

pub fn style_loss(
    tape: &mut Tape,
    extractor: &StyleExtractor,
    synth: Var,
    reference: Var,
) -> Result<Var> {
    let layers = style_layer_losses(tape, extractor, synth, reference)?;
    let mut total = layers[0];
    for &l in &layers[1..] {
        total = tape.add(total, l)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_style: f64,
    pub g_content: f64,
    pub g_loss: f64,
}

impl LossComponents {
    /// Names the first non-finite component.
    pub fn check_finite(&self, step: usize) -> Result<()> {
        for (name, v) in [
            ("d_loss", self.d_loss),
            ("g_adv", self.g_adv),
            ("g_style", self.g_style),
            ("g_content", self.g_content),
            ("g_loss", self.g_loss),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    stage: "gan",
                    step,
                    detail: format!("loss component {name} is {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Discriminator loss: half the sum of the real and fake terms.
pub fn discriminator_loss(
    tape: &mut Tape,
    adv: &dyn AdversarialLoss,
    disc: &Discriminator,
    disc_vars: &[Var],
    real: Var,
    fake: Var,
) -> Result<Var> {
    let lr = disc.forward(tape, disc_vars, real)?;
    let lf = disc.forward(tape, disc_vars, fake)?;
    let a = adv.loss(tape, lr, true)?;
    let b = adv.loss(tape, lf, false)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Generator-side terms: `(g_loss, g_adv, g_style, g_content)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    tape: &mut Tape,
    adv: &dyn AdversarialLoss,
    disc: &Discriminator,
    disc_vars: &[Var],
    extractor: &StyleExtractor,
    weights: &LossWeights,
    fake: Var,
    reference: Var,
    guidance: Var,
) -> Result<(Var, Var, Var, Var)> {
    let logits = disc.forward(tape, disc_vars, fake)?;
    let g_adv = adv.loss(tape, logits, true)?;
    let g_style = style_loss(tape, extractor, fake, reference)?;
    let g_content = content_loss(tape, fake, guidance)?;
    let a = tape.scale(g_adv, weights.adv);
    let s = tape.scale(g_style, weights.style);
    let c = tape.scale(g_content, weights.content);
    let sum = tape.add(a, s)?;
    let g_loss = tape.add(sum, c)?;
    Ok((g_loss, g_adv, g_style, g_content))
}

#[derive(Clone, Copy, Debug)]
pub struct GanLosses {
    pub g_loss: Var,
    pub d_loss: Var,
    pub components: LossComponents,
}

/// Both players' losses on one tape, with every component reported.
#[allow(clippy::too_many_arguments)]
pub fn gan_losses(
    tape: &mut Tape,
    adv: &dyn AdversarialLoss,
    disc: &Discriminator,
    disc_vars: &[Var],
    extractor: &StyleExtractor,
    weights: &LossWeights,
    fake: Var,
    reference: Var,
    guidance: Var,
) -> Result<GanLosses> {
    let d_loss = discriminator_loss(tape, adv, disc, disc_vars, reference, fake)?;
    let (g_loss, g_adv, g_style, g_content) = generator_loss(
        tape, adv, disc, disc_vars, extractor, weights, fake, reference, guidance,
    )?;
    let components = LossComponents {
        d_loss: tape.value(d_loss).item(),
        g_adv: tape.value(g_adv).item(),
        g_style: tape.value(g_style).item(),
        g_content: tape.value(g_content).item(),
        g_loss: tape.value(g_loss).item(),
    };
    components.check_finite(0)?;
    Ok(GanLosses {
        g_loss,
        d_loss,
        components,
    })
}
