//! Pixel classifiers on generator decoder features: feature extraction,
//! a seeded MLP ensemble with majority voting, connected-component cleanup
//! and Dice scoring.
//!
//! Each member has a shared two-layer trunk and one softmax head per slab
//! channel, so a single feature stack yields a label map for every channel.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{f64_from_le, f64_to_le, join_list, read_file, write_file, Header};
use crate::gan::SynthesisRecord;
use crate::numerics::kernels::resize_bilinear;
use crate::numerics::{build_optimizer, OptimizerConfig, ParamStore, Tape, Tensor, Var};
use crate::seed;
use crate::volumes::LabelVolume;

pub const ENSEMBLE_MAGIC: &str = "CS2ENS1";
pub const FEATURE_MAGIC: &str = "CS2FEA1";

/// Per-pixel feature vectors stored channel-major as `[F, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    values: Tensor,
}

impl FeatureStack {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims3()?;
        values.validate_finite("feature stack")?;
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut hd = Header::new(FEATURE_MAGIC);
        hd.set("dim", self.dim())
            .set("height", self.height())
            .set("width", self.width());
        hd.encode(&f64_to_le(self.values.data()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hd, payload) = Header::decode(bytes, FEATURE_MAGIC)?;
        let (f, h, w): (usize, usize, usize) =
            (hd.parse("dim")?, hd.parse("height")?, hd.parse("width")?);
        Self::new(Tensor::new(vec![f, h, w], f64_from_le(payload, f * h * w)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Upsamples every cached decoder map to the image size and concatenates
/// them channel-wise.
pub fn extract_pixel_features(record: &SynthesisRecord) -> Result<FeatureStack> {
    if record.decoder_features.is_empty() {
        return Err(Error::InvalidArgument(
            "synthesis record carries no decoder features".into(),
        ));
    }
    let (_, h, w) = record.image_norm.dims3()?;
    let mut data = Vec::new();
    let mut dim = 0;
    for f in &record.decoder_features {
        let (c, fh, fw) = f.dims3()?;
        for ch in 0..c {
            data.extend(resize_bilinear(f.channel(ch)?, fh, fw, h, w));
        }
        dim += c;
    }
    FeatureStack::new(Tensor::new(vec![dim, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    /// Output heads, one per slab channel.
    pub heads: usize,
    /// Training pixels sampled per member.
    pub pixel_cap: usize,
    pub epochs: usize,
    pub batch_pixels: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_members: 10,
            hidden: vec![64, 64],
            n_classes: 4,
            heads: 4,
            pixel_cap: 100_000,
            epochs: 4,
            batch_pixels: 1024,
            optimizer: OptimizerConfig::adam(1e-3, 0.9, 0.999),
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ensemble: {m}")));
        if self.n_members == 0 {
            return bad("n_members must be >= 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        if self.n_classes < 1 || self.n_classes > 256 {
            return bad("n_classes must be in 1..=256");
        }
        if self.heads == 0 || self.pixel_cap == 0 || self.batch_pixels == 0 {
            return bad("heads, pixel_cap and batch_pixels must be >= 1");
        }
        build_optimizer(&self.optimizer)?;
        Ok(())
    }

    pub fn member_seed(&self, m: usize) -> u64 {
        seed::derive_item_seed(seed::derive_seed(self.seed, "ensemble"), m as u64)
    }
}

fn init_member(cfg: &EnsembleConfig, dim: usize, seed: u64) -> ParamStore {
    let mut rng = seed::rng(seed);
    let mut p = ParamStore::new();
    let mut c = dim;
    for (i, &w) in cfg.hidden.iter().enumerate() {
        let std = (2.0 / c as f64).sqrt();
        p.push(format!("fc{i}.w"), Tensor::randn(&[w, c, 1, 1], std, &mut rng));
        p.push(format!("fc{i}.b"), Tensor::zeros(&[w]));
        c = w;
    }
    for k in 0..cfg.heads {
        let std = (1.0 / c as f64).sqrt();
        p.push(format!("head{k}.w"), Tensor::randn(&[cfg.n_classes, c, 1, 1], std, &mut rng));
        p.push(format!("head{k}.b"), Tensor::zeros(&[cfg.n_classes]));
    }
    p
}

/// Per-head logits `[K, 1, P]` for pixel columns `x` of shape `[F, 1, P]`.
fn member_forward(tape: &mut Tape, vars: &[Var], n_hidden: usize, heads: usize, x: Var) -> Result<Vec<Var>> {
    let mut h = x;
    for i in 0..n_hidden {
        h = tape.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]), 1, 0)?;
        h = tape.relu(h);
    }
    (0..heads)
        .map(|k| {
            let j = 2 * (n_hidden + k);
            tape.conv2d(h, vars[j], Some(vars[j + 1]), 1, 0)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EnsembleSegmenter {
    config: EnsembleConfig,
    feature_dim: usize,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    members: Vec<ParamStore>,
}

/// Gathers standardized pixel columns into a `[F, 1, P]` tensor.
fn gather(
    stacks: &[&FeatureStack],
    picks: &[(usize, usize)],
    mean: &[f64],
    std: &[f64],
) -> Result<Tensor> {
    let f = mean.len();
    let p = picks.len();
    let mut data = vec![0.0; f * p];
    for (j, &(s, pix)) in picks.iter().enumerate() {
        let st = stacks[s];
        let hw = st.height() * st.width();
        let v = st.values.data();
        for c in 0..f {
            data[c * p + j] = (v[c * hw + pix] - mean[c]) / std[c];
        }
    }
    Tensor::new(vec![f, 1, p], data)
}

pub fn train_ensemble(
    features: &[FeatureStack],
    labels: &[LabelVolume],
    cfg: &EnsembleConfig,
) -> Result<EnsembleSegmenter> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("train_ensemble needs at least one labeled image".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature stacks but {} label maps",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].dim();
    for (i, (f, l)) in features.iter().zip(labels).enumerate() {
        if f.dim() != dim {
            return Err(Error::shape("train_ensemble", format!("stack {i} has F={}, expected {dim}", f.dim())));
        }
        if (l.n_slices(), l.height(), l.width()) != (cfg.heads, f.height(), f.width()) {
            return Err(Error::shape(
                "train_ensemble",
                format!(
                    "labels {i} are {}x{}x{}, expected {}x{}x{}",
                    l.n_slices(),
                    l.height(),
                    l.width(),
                    cfg.heads,
                    f.height(),
                    f.width()
                ),
            ));
        }
        if let Some(p) = l.labels().iter().position(|&v| v as usize >= cfg.n_classes) {
            let hw = l.height() * l.width();
            return Err(Error::LabelOutOfRange {
                row: (p % hw) / l.width(),
                col: p % l.width(),
                label: l.labels()[p] as usize,
                classes: cfg.n_classes,
            });
        }
    }

    // feature standardization over every labeled pixel
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut count = 0.0;
    for f in features {
        let hw = f.height() * f.width();
        for c in 0..dim {
            for &v in &f.values.data()[c * hw..(c + 1) * hw] {
                mean[c] += v;
                sq[c] += v * v;
            }
        }
        count += hw as f64;
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / count - m * m).max(0.0)).sqrt().max(1e-6))
        .collect();

    let all: Vec<(usize, usize)> = features
        .iter()
        .enumerate()
        .flat_map(|(s, f)| (0..f.height() * f.width()).map(move |p| (s, p)))
        .collect();
    let stacks: Vec<&FeatureStack> = features.iter().collect();
    let n_hidden = cfg.hidden.len();

    let mut members = Vec::with_capacity(cfg.n_members);
    for m in 0..cfg.n_members {
        let member_seed = cfg.member_seed(m);
        let mut params = init_member(cfg, dim, member_seed);
        let mut rng = seed::rng(seed::derive_item_seed(member_seed, 1));
        let mut pool = all.clone();
        if pool.len() > cfg.pixel_cap {
            pool.shuffle(&mut rng);
            pool.truncate(cfg.pixel_cap);
        }
        let mut opt = build_optimizer(&cfg.optimizer)?;
        let mut step = 0;
        for _ in 0..cfg.epochs {
            pool.shuffle(&mut rng);
            for chunk in pool.chunks(cfg.batch_pixels) {
                let x = gather(&stacks, chunk, &mean, &std)?;
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let xv = tape.leaf(x);
                let logits = member_forward(&mut tape, &vars, n_hidden, cfg.heads, xv)?;
                let mut total: Option<Var> = None;
                for (k, &lg) in logits.iter().enumerate() {
                    let targets: Vec<usize> = chunk
                        .iter()
                        .map(|&(s, p)| labels[s].slice(k)[p] as usize)
                        .collect();
                    let ce = tape.cross_entropy(lg, &targets)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, ce)?,
                        None => ce,
                    });
                }
                let loss = tape.scale(total.expect("heads >= 1"), 1.0 / cfg.heads as f64);
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Divergence {
                        stage: "ensemble",
                        step,
                        detail: format!("member {m} loss is {lv}"),
                    });
                }
                let grads = tape.backward(loss)?;
                let grads = params.collect_grads(&grads, &vars);
                opt.step(&mut params, &grads)
                    .map_err(|e| Error::Divergence {
                        stage: "ensemble",
                        step,
                        detail: format!("member {m}: {e}"),
                    })?;
                step += 1;
            }
        }
        members.push(params);
    }
    Ok(EnsembleSegmenter {
        config: cfg.clone(),
        feature_dim: dim,
        feature_mean: mean,
        feature_std: std,
        members,
    })
}

/// Per-pixel modal vote; ties go to the lowest class index.
pub fn majority_vote(votes: &[Vec<u8>], n_classes: usize) -> Result<Vec<u8>> {
    let first = votes
        .first()
        .ok_or_else(|| Error::InvalidArgument("majority_vote needs at least one voter".into()))?;
    if votes.iter().any(|v| v.len() != first.len()) {
        return Err(Error::shape("majority_vote", "voters disagree on pixel count"));
    }
    let mut counts = vec![0usize; n_classes];
    let mut out = Vec::with_capacity(first.len());
    for p in 0..first.len() {
        counts.iter_mut().for_each(|c| *c = 0);
        for v in votes {
            let c = v[p] as usize;
            if c >= n_classes {
                return Err(Error::InvalidArgument(format!("vote {c} outside {n_classes} classes")));
            }
            counts[c] += 1;
        }
        let mut best = 0;
        for c in 1..n_classes {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

impl EnsembleSegmenter {
    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[ParamStore] {
        &self.members
    }

    /// Returns a copy with members reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.members.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument("order is not a permutation of the members".into()));
        }
        Ok(Self {
            members: order.iter().map(|&i| self.members[i].clone()).collect(),
            ..self.clone()
        })
    }

    /// Argmax labels of every member: `votes[m]` has `heads * H * W` entries.
    pub fn member_votes(&self, features: &FeatureStack) -> Result<Vec<Vec<u8>>> {
        if features.dim() != self.feature_dim {
            return Err(Error::shape(
                "predict",
                format!("feature dim {} but ensemble expects {}", features.dim(), self.feature_dim),
            ));
        }
        let hw = features.height() * features.width();
        let picks: Vec<(usize, usize)> = (0..hw).map(|p| (0, p)).collect();
        let x = gather(&[features], &picks, &self.feature_mean, &self.feature_std)?;
        let k = self.config.n_classes;
        self.members
            .iter()
            .map(|params| {
                let mut tape = Tape::new();
                let vars = params.bind_frozen(&mut tape);
                let xv = tape.leaf(x.clone());
                let logits =
                    member_forward(&mut tape, &vars, self.config.hidden.len(), self.config.heads, xv)?;
                let mut out = Vec::with_capacity(self.config.heads * hw);
                for lg in logits {
                    let l = tape.value(lg).data();
                    for p in 0..hw {
                        let mut best = 0;
                        for c in 1..k {
                            if l[c * hw + p] > l[best * hw + p] {
                                best = c;
                            }
                        }
                        out.push(best as u8);
                    }
                }
                Ok(out)
            })
            .collect()
    }

    /// Majority-voted label map, one slice per head.
    pub fn predict(&self, features: &FeatureStack) -> Result<LabelVolume> {
        let votes = self.member_votes(features)?;
        let labels = majority_vote(&votes, self.config.n_classes)?;
        LabelVolume::new(self.config.heads, features.height(), features.width(), labels)
    }

    fn shapes(&self) -> String {
        let p = &self.members[0];
        let dims: Vec<String> = p
            .tensors()
            .iter()
            .map(|t| t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
            .collect();
        join_list(&dims)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_string(&self.config)
            .map_err(|e| Error::Config(format!("cannot serialize ensemble config: {e}")))?;
        let mut hd = Header::new(ENSEMBLE_MAGIC);
        hd.set("config", cfg)
            .set("feature_dim", self.feature_dim)
            .set("members", self.members.len())
            .set("member_names", join_list(self.members[0].names()))
            .set("member_shapes", self.shapes());
        let mut values = self.feature_mean.clone();
        values.extend(&self.feature_std);
        for m in &self.members {
            for t in m.tensors() {
                values.extend(t.data());
            }
        }
        Ok(hd.encode(&f64_to_le(&values)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hd, payload) = Header::decode(bytes, ENSEMBLE_MAGIC)?;
        let config: EnsembleConfig = serde_json::from_str(hd.require("config")?)
            .map_err(|e| Error::MalformedHeader(format!("ensemble config: {e}")))?;
        config.validate()?;
        let dim: usize = hd.parse("feature_dim")?;
        let n: usize = hd.parse("members")?;
        if n == 0 {
            return Err(Error::MalformedHeader("ensemble with no members".into()));
        }
        let template = init_member(&config, dim, 0);
        let mut seg = Self {
            config,
            feature_dim: dim,
            feature_mean: Vec::new(),
            feature_std: Vec::new(),
            members: vec![template.clone()],
        };
        if hd.require("member_names")? != join_list(template.names())
            || hd.require("member_shapes")? != seg.shapes()
        {
            return Err(Error::CheckpointMismatch(
                "stored member parameters do not match the stored ensemble config".into(),
            ));
        }
        let flat = f64_from_le(payload, 2 * dim + n * template.numel())?;
        seg.feature_mean = flat[..dim].to_vec();
        seg.feature_std = flat[dim..2 * dim].to_vec();
        let mut offset = 2 * dim;
        seg.members.clear();
        for _ in 0..n {
            let mut m = template.clone();
            let mut values = Vec::with_capacity(m.len());
            for t in m.tensors() {
                values.push(Tensor::new(t.shape().to_vec(), flat[offset..offset + t.len()].to_vec())?);
                offset += t.len();
            }
            m.load_values(values)?;
            seg.members.push(m);
        }
        Ok(seg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// 4-connected components of equal labels: per-pixel component id and the
/// size of each component.
fn components(mask: &[u8], h: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let mut id = vec![usize::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if id[start] != usize::MAX {
            continue;
        }
        let cid = sizes.len();
        let mut size = 0;
        id[start] = cid;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if id[q] == usize::MAX && mask[q] == mask[start] {
                    id[q] = cid;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    (id, sizes)
}

/// Relabels every 4-connected component smaller than `min_size` with the
/// majority label of the large components bordering it (lowest label on
/// ties). Components with no large neighbour wait for a later pass; a
/// plane with no large component is returned unchanged.
pub fn postprocess_components(mask: &[u8], h: usize, w: usize, min_size: usize) -> Result<Vec<u8>> {
    if mask.len() != h * w {
        return Err(Error::shape(
            "postprocess_components",
            format!("{} labels for a {h}x{w} plane", mask.len()),
        ));
    }
    let mut out = mask.to_vec();
    if min_size == 0 {
        return Ok(out);
    }
    loop {
        let (id, sizes) = components(&out, h, w);
        let n = sizes.len();
        let mut border: Vec<[usize; 256]> = Vec::new();
        let small: Vec<bool> = sizes.iter().map(|&s| s < min_size).collect();
        let mut slot = vec![usize::MAX; n];
        for (c, &is_small) in small.iter().enumerate() {
            if is_small {
                slot[c] = border.len();
                border.push([0usize; 256]);
            }
        }
        if border.is_empty() {
            return Ok(out);
        }
        for p in 0..out.len() {
            let s = slot[id[p]];
            if s == usize::MAX {
                continue;
            }
            let (r, c) = (p / w, p % w);
            let mut neighbours = [usize::MAX; 4];
            if r > 0 {
                neighbours[0] = p - w;
            }
            if r + 1 < h {
                neighbours[1] = p + w;
            }
            if c > 0 {
                neighbours[2] = p - 1;
            }
            if c + 1 < w {
                neighbours[3] = p + 1;
            }
            for q in neighbours.into_iter().filter(|&q| q != usize::MAX) {
                if !small[id[q]] {
                    border[s][out[q] as usize] += 1;
                }
            }
        }
        let target: Vec<Option<u8>> = border
            .iter()
            .map(|counts| {
                let best = (0..256).max_by_key(|&l| (counts[l], std::cmp::Reverse(l)))?;
                (counts[best] > 0).then_some(best as u8)
            })
            .collect();
        if target.iter().all(Option::is_none) {
            return Ok(out);
        }
        for p in 0..out.len() {
            let s = slot[id[p]];
            if s != usize::MAX {
                if let Some(t) = target[s] {
                    out[p] = t;
                }
            }
        }
    }
}

/// `2|P ∩ T| / (|P| + |T|)`, and 1 when both sets are empty.
pub fn dice(pred: &[u8], truth: &[u8], class_id: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "dice",
            format!("prediction has {} pixels, truth {}", pred.len(), truth.len()),
        ));
    }
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (a, b) = (p == class_id, t == class_id);
        inter += (a && b) as usize;
        np += a as usize;
        nt += b as usize;
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Dice report as CSV rows `class,dice`.
pub fn dice_csv(pred: &[u8], truth: &[u8], classes: &[u8]) -> Result<String> {
    let mut s = String::from("class,dice\n");
    for &c in classes {
        s.push_str(&format!("{c},{}\n", dice(pred, truth, c)?));
    }
    Ok(s)
}

/// Replaces a fraction of pixels with uniformly random labels.
pub fn salt_noise(mask: &[u8], fraction: f64, n_classes: u8, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = mask.to_vec();
    let mut idx: Vec<usize> = (0..mask.len()).collect();
    idx.shuffle(rng);
    let k = (fraction * mask.len() as f64).round() as usize;
    for &p in &idx[..k.min(mask.len())] {
        out[p] = rng.gen_range(0..n_classes);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::{synthesize, Generator, GeneratorArch};
    use crate::volumes::HuWindow;
    use proptest::prelude::*;

    fn small_cfg() -> EnsembleConfig {
        EnsembleConfig {
            n_members: 3,
            hidden: vec![8, 8],
            heads: 2,
            n_classes: 3,
            epochs: 20,
            batch_pixels: 64,
            optimizer: OptimizerConfig::adam(1e-2, 0.9, 0.999),
            ..Default::default()
        }
    }

    fn stack(seed: u64, f: usize, h: usize, w: usize) -> FeatureStack {
        let mut rng = seed::rng(seed);
        FeatureStack::new(Tensor::uniform(&[f, h, w], -1.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn feature_dim_is_decoder_width_sum() {
        let gen = Generator::new(
            GeneratorArch {
                channels: 4,
                encoder_widths: vec![32, 64],
                n_resblocks: 1,
            },
            0,
        )
        .unwrap();
        let mut rng = seed::rng(1);
        let g = Tensor::uniform(&[4, 16, 16], 0.0, 1.0, &mut rng);
        let rec = synthesize(&gen, &g, &g, HuWindow::default()).unwrap();
        let fs = extract_pixel_features(&rec).unwrap();
        assert_eq!(fs.dim(), 96);
        assert_eq!(fs.dim(), gen.decoder_width_sum());
        // the last decoder map is already full size and passes through
        let last = rec.decoder_features.last().unwrap();
        assert_eq!(&fs.values().data()[64 * 256..], last.data());

        let mut empty = rec;
        empty.decoder_features.clear();
        assert!(extract_pixel_features(&empty).is_err());
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let up = resize_bilinear(&[2.5; 16], 4, 4, 9, 7);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn vote_examples() {
        let unanimous: Vec<Vec<u8>> = vec![vec![2]; 10];
        assert_eq!(majority_vote(&unanimous, 4).unwrap(), vec![2]);
        let mut m: Vec<Vec<u8>> = vec![vec![1]; 6];
        m.extend(vec![vec![3]; 4]);
        assert_eq!(majority_vote(&m, 4).unwrap(), vec![1]);
        let mut t: Vec<Vec<u8>> = vec![vec![2]; 5];
        t.extend(vec![vec![0]; 5]);
        assert_eq!(majority_vote(&t, 4).unwrap(), vec![0]);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0], 1).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0], &[0, 1], 1).unwrap(), 0.0);
        assert!((dice(&[1, 0, 0], &[1, 1, 0], 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&[0, 0], &[0, 0], 3).unwrap(), 1.0);
        assert!(dice(&[0], &[0, 0], 0).is_err());
    }

    #[test]
    fn postprocess_examples() {
        let mut m = vec![2u8; 25];
        m[12] = 3;
        assert_eq!(postprocess_components(&m, 5, 5, 0).unwrap(), m);
        assert_eq!(postprocess_components(&m, 5, 5, 2).unwrap(), vec![2u8; 25]);
        // a lone small plane has nothing to merge into
        assert_eq!(postprocess_components(&[1, 2], 1, 2, 5).unwrap(), vec![1, 2]);
    }

    #[test]
    fn single_class_supervision() {
        let fs = vec![stack(0, 5, 6, 6)];
        let labels = vec![LabelVolume::new(2, 6, 6, vec![1; 72]).unwrap()];
        let ens = train_ensemble(&fs, &labels, &small_cfg()).unwrap();
        assert_eq!(ens.n_members(), 3);
        assert!(ens.predict(&fs[0]).unwrap().labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let fs = vec![stack(0, 5, 6, 6), stack(1, 5, 6, 6)];
        let labels: Vec<LabelVolume> = (0..2)
            .map(|s| {
                let l = (0..72).map(|i| ((i * 7 + s) % 3) as u8).collect();
                LabelVolume::new(2, 6, 6, l).unwrap()
            })
            .collect();
        let a = train_ensemble(&fs, &labels, &small_cfg()).unwrap();
        let b = train_ensemble(&fs, &labels, &small_cfg()).unwrap();
        for (x, y) in a.members().iter().zip(b.members()) {
            assert_eq!(x.tensors(), y.tensors());
        }
        let back = EnsembleSegmenter::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back.predict(&fs[0]).unwrap(), a.predict(&fs[0]).unwrap());
        let perm = a.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(perm.predict(&fs[1]).unwrap(), a.predict(&fs[1]).unwrap());
        assert!(a.predict(&stack(0, 4, 6, 6)).is_err());
    }

    #[test]
    fn bad_labels_rejected() {
        let fs = vec![stack(0, 5, 4, 4)];
        let labels = vec![LabelVolume::new(2, 4, 4, vec![3; 32]).unwrap()];
        assert!(matches!(
            train_ensemble(&fs, &labels, &small_cfg()),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        assert!(train_ensemble(&[], &[], &small_cfg()).is_err());
    }

    proptest! {
        #[test]
        fn vote_is_permutation_invariant(
            votes in prop::collection::vec(prop::collection::vec(0u8..4, 12), 1..8),
            rot in 0usize..8,
        ) {
            let base = majority_vote(&votes, 4).unwrap();
            let mut rotated = votes.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            prop_assert_eq!(majority_vote(&rotated, 4).unwrap(), base.clone());
            prop_assert!(base.iter().all(|&c| c < 4));
        }

        #[test]
        fn dice_symmetric_and_exact(
            a in prop::collection::vec(0u8..3, 20),
            b in prop::collection::vec(0u8..3, 20),
        ) {
            let d = dice(&a, &b, 1).unwrap();
            prop_assert_eq!(d, dice(&b, &a, 1).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            let sa: Vec<bool> = a.iter().map(|&v| v == 1).collect();
            let sb: Vec<bool> = b.iter().map(|&v| v == 1).collect();
            if sa.iter().any(|&x| x) || sb.iter().any(|&x| x) {
                prop_assert_eq!(d == 1.0, sa == sb);
            }
        }

        #[test]
        fn postprocess_never_invents_classes(
            m in prop::collection::vec(0u8..4, 64),
            min_size in 0usize..10,
        ) {
            let out = postprocess_components(&m, 8, 8, min_size).unwrap();
            for v in &out {
                prop_assert!(m.contains(v));
            }
            let (_, sizes) = components(&out, 8, 8);
            if sizes.iter().any(|&s| s >= min_size) {
                prop_assert!(sizes.iter().all(|&s| s >= min_size));
            }
        }
    }
}
