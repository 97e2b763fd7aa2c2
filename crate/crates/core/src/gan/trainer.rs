use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::losses::{build_adversarial, discriminator_loss, generator_loss, AdversarialLoss};
use super::nets::{Discriminator, Generator, StyleExtractor};
use super::{GanCheckpoint, GanConfig};
use crate::error::{Error, Result};
use crate::numerics::{build_optimizer, Optimizer, Tape, Tensor};
use crate::seed;

/// A guidance map and the reference slab it was derived from, both
/// normalized to `[0, 1]` and shaped `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GanItem {
    pub guidance: Tensor,
    pub reference: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_style: f64,
    pub g_content: f64,
    pub g_loss: f64,
}

impl StepLog {
    pub fn csv_header() -> &'static str {
        "step,d_loss,g_adv,g_style,g_content\n"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}\n",
            self.step, self.d_loss, self.g_adv, self.g_style, self.g_content
        )
    }
}

pub struct GanTrainer {
    cfg: GanConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    extractor: StyleExtractor,
    adv: Box<dyn AdversarialLoss>,
    g_opt: Box<dyn Optimizer>,
    d_opt: Box<dyn Optimizer>,
    rng: ChaCha8Rng,
    pairs: Vec<(usize, usize)>,
    cursor: usize,
    step: usize,
    log: Vec<StepLog>,
}

fn add_scaled(acc: &mut [Tensor], grads: &[Tensor], k: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(x, y)| *x += k * y);
    }
}

fn zeros_like(ts: &[Tensor]) -> Vec<Tensor> {
    ts.iter().map(|t| Tensor::zeros(t.shape())).collect()
}

impl GanTrainer {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.arch(), seed::derive_seed(cfg.seed, "generator"))?;
        let discriminator = Discriminator::new(
            cfg.channels,
            &cfg.disc_widths,
            seed::derive_seed(cfg.seed, "discriminator"),
        )?;
        Ok(Self {
            extractor: StyleExtractor::new(cfg.channels, cfg.extractor_seed),
            adv: build_adversarial(&cfg.adversarial)?,
            g_opt: build_optimizer(&cfg.g_optimizer)?,
            d_opt: build_optimizer(&cfg.d_optimizer)?,
            rng: seed::rng(seed::derive_seed(cfg.seed, "pairing")),
            cfg: cfg.clone(),
            generator,
            discriminator,
            pairs: Vec::new(),
            cursor: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    /// Parameters after the last completed step.
    pub fn checkpoint(&self) -> GanCheckpoint {
        GanCheckpoint {
            config: self.cfg.clone(),
            step: self.step,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
        }
    }

    fn check_corpus(&self, corpus: &[GanItem]) -> Result<()> {
        let need = self.cfg.batch_size.max(2);
        if corpus.len() < need {
            return Err(Error::InvalidArgument(format!(
                "GAN corpus has {} items; non-corresponding pairing with batch size {} needs at least {need}",
                corpus.len(),
                self.cfg.batch_size
            )));
        }
        let s = self.cfg.image_size;
        let want = [self.cfg.channels, s, s];
        for (i, item) in corpus.iter().enumerate() {
            if item.guidance.shape() != want || item.reference.shape() != want {
                return Err(Error::shape(
                    "train_gan",
                    format!(
                        "item {i}: guidance {:?} / reference {:?}, expected {:?}",
                        item.guidance.shape(),
                        item.reference.shape(),
                        want
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Reshuffles guidance order and pairs each with the reference of a
    /// different item (a random non-zero cyclic offset).
    fn new_epoch(&mut self, n: usize) {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);
        let offset = self.rng.gen_range(1..n);
        self.pairs = (0..n).map(|k| (perm[k], perm[(k + offset) % n])).collect();
        self.cursor = 0;
    }

    fn next_batch(&mut self, n: usize) -> Vec<(usize, usize)> {
        let b = self.cfg.batch_size;
        if self.pairs.len() != n || self.cursor + b > self.pairs.len() {
            self.new_epoch(n);
        }
        let batch = self.pairs[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        batch
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, corpus: &[GanItem]) -> Result<StepLog> {
        self.check_corpus(corpus)?;
        let step = self.step;
        let batch = self.next_batch(corpus.len());
        let inv_b = 1.0 / batch.len() as f64;
        let diverged = |detail: String| Error::Divergence {
            stage: "gan",
            step,
            detail,
        };

        let mut fwd = Vec::with_capacity(batch.len());
        for &(gi, ri) in &batch {
            let mut tape = Tape::new();
            let gvars = self.generator.params.bind(&mut tape);
            let g = tape.leaf(corpus[gi].guidance.clone());
            let r = tape.leaf(corpus[ri].reference.clone());
            let out = self.generator.forward(&mut tape, &gvars, g, r)?.output;
            fwd.push((tape, gvars, out, g, r));
        }

        let mut d_grads = zeros_like(self.discriminator.params.tensors());
        let mut d_loss = 0.0;
        for (tape, _, out, _, r) in &fwd {
            let mut dt = Tape::new();
            let dvars = self.discriminator.params.bind(&mut dt);
            let real = dt.leaf(tape.value(*r).clone());
            let fake = dt.leaf(tape.value(*out).clone());
            let l = discriminator_loss(&mut dt, self.adv.as_ref(), &self.discriminator, &dvars, real, fake)?;
            let v = dt.value(l).item();
            if !v.is_finite() {
                return Err(diverged(format!("loss component d_loss is {v}")));
            }
            d_loss += v * inv_b;
            let g = dt.backward(l)?;
            add_scaled(&mut d_grads, &self.discriminator.params.collect_grads(&g, &dvars), inv_b);
        }
        let d_backup = self.discriminator.params.clone();
        self.d_opt
            .step(&mut self.discriminator.params, &d_grads)
            .map_err(|e| diverged(e.to_string()))?;

        let mut g_grads = zeros_like(self.generator.params.tensors());
        let mut parts = [0.0f64; 4];
        let result: Result<()> = (|| {
            for (tape, gvars, out, g, r) in fwd.iter_mut() {
                let dvars = self.discriminator.params.bind_frozen(tape);
                let (gl, ga, gs, gc) = generator_loss(
                    tape,
                    self.adv.as_ref(),
                    &self.discriminator,
                    &dvars,
                    &self.extractor,
                    &self.cfg.weights,
                    *out,
                    *r,
                    *g,
                )?;
                for (p, v) in parts.iter_mut().zip([gl, ga, gs, gc]) {
                    *p += tape.value(v).item() * inv_b;
                }
                let grads = tape.backward(gl)?;
                add_scaled(&mut g_grads, &self.generator.params.collect_grads(&grads, gvars), inv_b);
            }
            let entry = StepLog {
                step,
                d_loss,
                g_adv: parts[1],
                g_style: parts[2],
                g_content: parts[3],
                g_loss: parts[0],
            };
            super::LossComponents {
                d_loss,
                g_adv: entry.g_adv,
                g_style: entry.g_style,
                g_content: entry.g_content,
                g_loss: entry.g_loss,
            }
            .check_finite(step)?;
            self.g_opt
                .step(&mut self.generator.params, &g_grads)
                .map_err(|e| diverged(e.to_string()))
        })();
        if let Err(e) = result {
            self.discriminator.params = d_backup;
            return Err(e);
        }
        let entry = StepLog {
            step,
            d_loss,
            g_adv: parts[1],
            g_style: parts[2],
            g_content: parts[3],
            g_loss: parts[0],
        };
        self.log.push(entry);
        self.step += 1;
        Ok(entry)
    }

    /// Runs until `cfg.steps` steps are done.
    pub fn run(&mut self, corpus: &[GanItem]) -> Result<()> {
        while self.step < self.cfg.steps {
            self.train_step(corpus)?;
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(StepLog::csv_header());
        self.log.iter().for_each(|r| s.push_str(&r.csv_row()));
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainedGan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: Vec<StepLog>,
}

pub fn train_gan(corpus: &[GanItem], cfg: &GanConfig) -> Result<TrainedGan> {
    let mut t = GanTrainer::new(cfg)?;
    t.run(corpus)?;
    Ok(TrainedGan {
        log: t.log,
        generator: t.generator,
        discriminator: t.discriminator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> GanConfig {
        GanConfig {
            image_size: 16,
            channels: 2,
            encoder_widths: vec![4, 8],
            n_resblocks: 1,
            disc_widths: vec![4, 4],
            steps: 5,
            ..Default::default()
        }
    }

    fn corpus(n: usize) -> Vec<GanItem> {
        let mut rng = seed::rng(9);
        (0..n)
            .map(|_| GanItem {
                guidance: Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut rng),
                reference: Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut rng),
            })
            .collect()
    }

    #[test]
    fn smoke_and_determinism() {
        let c = corpus(8);
        let a = train_gan(&c, &tiny_cfg()).unwrap();
        assert_eq!(a.log.len(), 5);
        for r in &a.log {
            assert!([r.d_loss, r.g_adv, r.g_style, r.g_content].iter().all(|v| v.is_finite()));
        }
        let b = train_gan(&c, &tiny_cfg()).unwrap();
        assert_eq!(a.generator.params.tensors(), b.generator.params.tensors());
        assert_eq!(a.discriminator.params.tensors(), b.discriminator.params.tensors());
    }

    #[test]
    fn pairs_never_correspond() {
        let mut t = GanTrainer::new(&GanConfig {
            batch_size: 3,
            ..tiny_cfg()
        })
        .unwrap();
        for _ in 0..20 {
            for (g, r) in t.next_batch(7) {
                assert_ne!(g, r);
            }
        }
    }

    #[test]
    fn small_corpus_rejected() {
        let mut t = GanTrainer::new(&tiny_cfg()).unwrap();
        assert!(t.train_step(&corpus(1)).is_err());
    }

    #[test]
    fn divergence_names_step_and_component() {
        let mut t = GanTrainer::new(&tiny_cfg()).unwrap();
        let mut c = corpus(4);
        t.train_step(&c).unwrap();
        let before = t.checkpoint();
        for item in c.iter_mut() {
            item.guidance.data_mut()[0] = f64::NAN;
        }
        let err = t.train_step(&c).unwrap_err().to_string();
        assert!(err.contains("step 1") && err.contains("g_content"), "{err}");
        let after = t.checkpoint();
        assert_eq!(before.step, after.step);
        assert_eq!(before.generator.params.tensors(), after.generator.params.tensors());
        assert_eq!(before.discriminator.params.tensors(), after.discriminator.params.tensors());
    }
}
