use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var, NORM_EPS};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorArch {
    /// Input and output channel count (slab depth).
    pub channels: usize,
    /// Widths of the stride-2 encoder blocks; the decoder mirrors them.
    pub encoder_widths: Vec<usize>,
    pub n_resblocks: usize,
}

impl GeneratorArch {
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.encoder_widths.iter().rev().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    EncoderConv,
    ResBlock,
    DecoderConv,
    OutputHead,
}

/// What one block executed during a forward pass, in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub kind: BlockKind,
    pub ops: Vec<&'static str>,
}

impl BlockInfo {
    pub fn has_adain(&self) -> bool {
        self.ops.contains(&"adain")
    }
}

/// One AdaIN application: `output = adain(content, style)`.
#[derive(Clone, Copy, Debug)]
pub struct AdainSite {
    pub block: usize,
    pub content: Var,
    pub style: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct GenForward {
    /// `[C, H, W]` image in `[0, 1]`.
    pub output: Var,
    /// Post-activation output of every decoder block, shallowest last.
    pub decoder_features: Vec<Var>,
    pub sites: Vec<AdainSite>,
    pub blocks: Vec<BlockInfo>,
}

fn he(shape: &[usize], gain: f64, rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, gain * (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Generator {
    arch: GeneratorArch,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        if arch.encoder_widths.is_empty() || arch.channels == 0 {
            return Err(Error::InvalidArgument(
                "generator needs at least one encoder block and one channel".into(),
            ));
        }
        let mut rng = seed::rng(seed);
        let mut p = ParamStore::new();
        let mut c = arch.channels;
        for (i, &w) in arch.encoder_widths.iter().enumerate() {
            p.push(format!("enc{i}.w"), he(&[w, c, 3, 3], 1.0, &mut rng));
            p.push(format!("enc{i}.b"), Tensor::zeros(&[w]));
            c = w;
        }
        for j in 0..arch.n_resblocks {
            p.push(format!("res{j}.conv1.w"), he(&[c, c, 3, 3], 1.0, &mut rng));
            p.push(format!("res{j}.conv1.b"), Tensor::zeros(&[c]));
            // small residual branch at init keeps the stack near identity
            p.push(format!("res{j}.conv2.w"), he(&[c, c, 3, 3], 0.1, &mut rng));
            p.push(format!("res{j}.conv2.b"), Tensor::zeros(&[c]));
        }
        for (k, w) in arch.decoder_widths().into_iter().enumerate() {
            p.push(format!("dec{k}.w"), he(&[w, c, 3, 3], 1.0, &mut rng));
            p.push(format!("dec{k}.b"), Tensor::zeros(&[w]));
            c = w;
        }
        p.push("head.w", he(&[arch.channels, c, 3, 3], 0.5, &mut rng));
        p.push("head.b", Tensor::zeros(&[arch.channels]));
        Ok(Self { arch, params: p })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn decoder_width_sum(&self) -> usize {
        self.arch.encoder_widths.iter().sum()
    }

    /// Runs both streams through the shared encoder. `vars` are the bound
    /// parameters in store order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        guidance: Var,
        reference: Var,
    ) -> Result<GenForward> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "generator_forward",
                format!("{} bound vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        let (gs, rs) = (tape.value(guidance).shape(), tape.value(reference).shape());
        if gs != rs || gs.len() != 3 || gs[0] != self.arch.channels {
            return Err(Error::shape(
                "generator_forward",
                format!(
                    "guidance {:?} and reference {:?} must both be [{}, H, W]",
                    gs, rs, self.arch.channels
                ),
            ));
        }
        let n_enc = self.arch.encoder_widths.len();
        if gs[1] % (1 << n_enc) != 0 || gs[2] % (1 << n_enc) != 0 {
            return Err(Error::shape(
                "generator_forward",
                format!("spatial size {}x{} is not divisible by {}", gs[1], gs[2], 1 << n_enc),
            ));
        }
        let mut next = 0;
        let mut take = |n: usize| {
            let v = &vars[next..next + n];
            next += n;
            v.to_vec()
        };
        let mut blocks = Vec::new();
        let mut sites = Vec::new();
        let mut style_stats = Vec::new();
        let (mut c, mut s) = (guidance, reference);

        for i in 0..n_enc {
            let p = take(2);
            let c_pre = tape.conv2d(c, p[0], Some(p[1]), 2, 1)?;
            let s_pre = tape.conv2d(s, p[0], Some(p[1]), 2, 1)?;
            let out = tape.adain(c_pre, s_pre, NORM_EPS)?;
            sites.push(AdainSite {
                block: blocks.len(),
                content: c_pre,
                style: s_pre,
                output: out,
            });
            c = tape.relu(out);
            // the reference stream is its own style, so its AdaIN is the identity
            s = tape.relu(s_pre);
            style_stats.push(s_pre);
            blocks.push(BlockInfo {
                name: format!("enc{i}"),
                kind: BlockKind::EncoderConv,
                ops: vec!["conv", "adain", "relu"],
            });
        }
        for j in 0..self.arch.n_resblocks {
            let p = take(4);
            let h = tape.conv2d(c, p[0], Some(p[1]), 1, 1)?;
            let h = tape.relu(h);
            let h = tape.conv2d(h, p[2], Some(p[3]), 1, 1)?;
            c = tape.add(c, h)?;
            blocks.push(BlockInfo {
                name: format!("res{j}"),
                kind: BlockKind::ResBlock,
                ops: vec!["conv", "relu", "conv", "add"],
            });
        }
        let mut decoder_features = Vec::new();
        for k in 0..n_enc {
            let p = take(2);
            let up = tape.upsample2(c)?;
            let pre = tape.conv2d(up, p[0], Some(p[1]), 1, 1)?;
            // deepest encoder statistics first, matching widths
            let style = style_stats[n_enc - 1 - k];
            let out = tape.adain(pre, style, NORM_EPS)?;
            sites.push(AdainSite {
                block: blocks.len(),
                content: pre,
                style,
                output: out,
            });
            c = tape.relu(out);
            decoder_features.push(c);
            blocks.push(BlockInfo {
                name: format!("dec{k}"),
                kind: BlockKind::DecoderConv,
                ops: vec!["upsample", "conv", "adain", "relu"],
            });
        }
        let p = take(2);
        let logits = tape.conv2d(c, p[0], Some(p[1]), 1, 1)?;
        let output = tape.sigmoid(logits);
        blocks.push(BlockInfo {
            name: "head".into(),
            kind: BlockKind::OutputHead,
            ops: vec!["conv", "sigmoid"],
        });
        Ok(GenForward {
            output,
            decoder_features,
            sites,
            blocks,
        })
    }
}

/// Stride-2 conv + LeakyReLU stack ending in a one-channel patch-logit map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidArgument("discriminator needs a block".into()));
        }
        let mut rng = seed::rng(seed);
        let mut p = ParamStore::new();
        let mut c = channels;
        for (i, &w) in widths.iter().enumerate() {
            p.push(format!("disc{i}.w"), he(&[w, c, 3, 3], 1.0, &mut rng));
            p.push(format!("disc{i}.b"), Tensor::zeros(&[w]));
            c = w;
        }
        p.push("disc_out.w", he(&[1, c, 3, 3], 0.5, &mut rng));
        p.push("disc_out.b", Tensor::zeros(&[1]));
        Ok(Self { params: p })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let n = self.params.len() / 2 - 1;
        let mut h = x;
        for i in 0..n {
            h = tape.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]), 2, 1)?;
            h = tape.leaky_relu(h, 0.2);
        }
        tape.conv2d(h, vars[2 * n], Some(vars[2 * n + 1]), 1, 1)
    }
}

/// Fixed random conv features for Gram-matrix style matching. The first
/// layer is pointwise, so its Gram matrix ignores pixel arrangement.
#[derive(Clone, Debug)]
pub struct StyleExtractor {
    params: ParamStore,
    strides: Vec<usize>,
}

impl StyleExtractor {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut p = ParamStore::new();
        let layers = [(16usize, 1usize, 1usize), (32, 3, 2), (32, 3, 2), (64, 3, 2)];
        let mut c = channels;
        let mut strides = Vec::new();
        for (i, &(w, k, stride)) in layers.iter().enumerate() {
            p.push(format!("style{i}.w"), he(&[w, c, k, k], 1.0, &mut rng));
            strides.push(stride);
            c = w;
        }
        Self { params: p, strides }
    }

    pub fn n_layers(&self) -> usize {
        self.strides.len()
    }

    /// ReLU feature maps of every layer; weights enter the tape as constants.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let vars = self.params.bind_frozen(tape);
        let mut out = Vec::with_capacity(vars.len());
        let mut h = x;
        for (i, &w) in vars.iter().enumerate() {
            let pad = tape.value(w).shape()[2] / 2;
            h = tape.conv2d(h, w, None, self.strides[i], pad)?;
            h = tape.relu(h);
            out.push(h);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::channel_moments;

    fn arch() -> GeneratorArch {
        GeneratorArch {
            channels: 2,
            encoder_widths: vec![4, 8],
            n_resblocks: 2,
        }
    }

    fn inputs(tape: &mut Tape, seed: u64) -> (Var, Var) {
        let mut rng = seed::rng(seed);
        let g = tape.leaf(Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng));
        let r = tape.leaf(Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng));
        (g, r)
    }

    #[test]
    fn output_shape_and_range() {
        let gen = Generator::new(arch(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = gen.params.bind_frozen(&mut tape);
        let (g, r) = inputs(&mut tape, 2);
        let f = gen.forward(&mut tape, &vars, g, r).unwrap();
        let out = tape.value(f.output);
        assert_eq!(out.shape(), &[2, 8, 8]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(tape.value(f.decoder_features[0]).shape(), &[8, 4, 4]);
        assert_eq!(tape.value(f.decoder_features[1]).shape(), &[4, 8, 8]);
        assert_eq!(gen.decoder_width_sum(), 12);
    }

    #[test]
    fn architecture_rule() {
        let gen = Generator::new(arch(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = gen.params.bind_frozen(&mut tape);
        let (g, r) = inputs(&mut tape, 2);
        let f = gen.forward(&mut tape, &vars, g, r).unwrap();
        for b in &f.blocks {
            match b.kind {
                BlockKind::EncoderConv | BlockKind::DecoderConv => assert!(b.has_adain(), "{}", b.name),
                BlockKind::ResBlock => assert!(!b.has_adain(), "{}", b.name),
                BlockKind::OutputHead => {}
            }
        }
        assert_eq!(f.sites.len(), 4);
    }

    #[test]
    fn self_style_sites_are_identity_renormalization() {
        let gen = Generator::new(arch(), 3).unwrap();
        let mut tape = Tape::new();
        let vars = gen.params.bind_frozen(&mut tape);
        let (g, _) = inputs(&mut tape, 4);
        let f = gen.forward(&mut tape, &vars, g, g).unwrap();
        for site in &f.sites[..2] {
            let a = tape.value(site.output);
            let b = tape.value(site.content);
            assert!(a.max_abs_diff(b) < 1e-9);
        }
    }

    #[test]
    fn adain_sites_match_style_statistics() {
        let gen = Generator::new(arch(), 5).unwrap();
        let mut tape = Tape::new();
        let vars = gen.params.bind_frozen(&mut tape);
        let (g, r) = inputs(&mut tape, 6);
        let f = gen.forward(&mut tape, &vars, g, r).unwrap();
        for site in &f.sites {
            let out = channel_moments(tape.value(site.output)).unwrap();
            let sty = channel_moments(tape.value(site.style)).unwrap();
            let con = channel_moments(tape.value(site.content)).unwrap();
            for ((o, s), c) in out.iter().zip(&sty).zip(&con) {
                assert!((o.0 - s.0).abs() < 1e-9);
                // std is exact once both sides' eps is accounted for
                let expect = (s.1 * s.1 + NORM_EPS).sqrt() * c.1 / (c.1 * c.1 + NORM_EPS).sqrt();
                assert!((o.1 - expect).abs() < 1e-9, "{} vs {}", o.1, expect);
            }
        }
    }

    #[test]
    fn discriminator_patch_map() {
        let d = Discriminator::new(2, &[4, 8, 8], 0).unwrap();
        let mut tape = Tape::new();
        let vars = d.params.bind_frozen(&mut tape);
        let (x, _) = inputs(&mut tape, 0);
        let logits = d.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 1, 1]);
        let mut tape = Tape::new();
        let vars = d.params.bind_frozen(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[2, 32, 32]));
        let logits = d.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 4, 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let gen = Generator::new(arch(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = gen.params.bind_frozen(&mut tape);
        let g = tape.leaf(Tensor::zeros(&[2, 8, 8]));
        let r = tape.leaf(Tensor::zeros(&[2, 8, 4]));
        assert!(gen.forward(&mut tape, &vars, g, r).is_err());
        let odd = tape.leaf(Tensor::zeros(&[2, 6, 6]));
        assert!(gen.forward(&mut tape, &vars, odd, odd).is_err());
    }
}
