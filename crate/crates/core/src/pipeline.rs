//! File-based pipeline stages. Every stage reads its inputs from
//! directories of indexed files, writes its outputs plus a `config.toml`
//! echo into one output directory, and is deterministic for a given config.
//!
//! | file                      | format    | written by        |
//! |---------------------------|-----------|-------------------|
//! | `vol_NNNN.cs2vol`         | CS2VOL1   | phantom           |
//! | `truth_NNNN.cs2msk`       | CS2MSK1   | phantom           |
//! | `slab_truth_NNNN.cs2msk`  | CS2MSK1   | phantom           |
//! | `mask_NNNN.cs2msk`        | CS2MSK1   | maskgen           |
//! | `slab_NNNN.cs2vol`        | CS2VOL1   | maskgen           |
//! | `trace_NNNN_cC.csv`       | CSV       | maskgen           |
//! | `guide_NNNN.cs2gdf`       | CS2GDF1   | guide             |
//! | `gan.ckpt`, `train_log.csv` | CS2CKP1, CSV | train-gan    |
//! | `synth_NNNN_K.cs2vol/.cs2fea` | CS2VOL1, CS2FEA1 | synth  |
//! | `ensemble.ckpt`, `labeled.txt` | CS2ENS1 | train-seg      |
//! | `image_NNNN_K.cs2vol`, `mask_NNNN_K.cs2msk` | | infer      |

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::ensemble::{
    dice, extract_pixel_features, postprocess_components, train_ensemble, EnsembleSegmenter,
    FeatureStack,
};
use crate::error::{Error, Result};
use crate::format::{read_file, write_file};
use crate::gan::{synthesize, GanCheckpoint, GanItem, GanTrainer, Generator};
use crate::guidance::{load_edits, mean_hu_assignment, EditOp, GuidanceStack};
use crate::maskgen::{train_unsupervised, ClusterMask};
use crate::numerics::Tensor;
use crate::phantom::phantom_corpus;
use crate::seed::derive_item_seed;
use crate::volumes::{select_2_5d, HuVolume, HuWindow, LabelVolume, SLAB_CHANNELS};

pub const CONFIG_ECHO: &str = "config.toml";

/// Writes the effective config into `out`, creating it if needed.
pub fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.save(&out.join(CONFIG_ECHO))
}

fn name(prefix: &str, i: usize, ext: &str) -> String {
    format!("{prefix}_{i:04}.{ext}")
}

fn name_k(prefix: &str, i: usize, k: usize, ext: &str) -> String {
    format!("{prefix}_{i:04}_{k}.{ext}")
}

/// Files `<prefix>_<index>[_<k>].<ext>` in `dir`, sorted by index then k.
fn indexed(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(usize, Option<usize>, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        let Some(stem) = file
            .strip_prefix(prefix)
            .and_then(|s| s.strip_prefix('_'))
            .and_then(|s| s.strip_suffix(ext))
            .and_then(|s| s.strip_suffix('.'))
        else {
            continue;
        };
        let mut parts = stem.split('_');
        let Some(Ok(i)) = parts.next().map(str::parse::<usize>) else {
            continue;
        };
        let k = match parts.next() {
            None => None,
            Some(k) => match k.parse() {
                Ok(k) => Some(k),
                Err(_) => continue,
            },
        };
        if parts.next().is_none() {
            found.push((i, k, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::MissingInput(dir.join(format!("{prefix}_*.{ext}"))));
    }
    Ok(found)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path))
    }
}

fn load_volume(path: &Path) -> Result<HuVolume> {
    HuVolume::from_bytes(&read_file(path)?)
}

fn load_labels(path: &Path) -> Result<LabelVolume> {
    LabelVolume::from_bytes(&read_file(path)?)
}

fn slab_tensor(slab: &HuVolume, window: HuWindow) -> Result<Tensor> {
    let values: Vec<f64> = slab.voxels().iter().map(|&v| window.normalize(f64::from(v))).collect();
    Tensor::new(vec![slab.n_slices(), slab.height(), slab.width()], values)
}

fn guide_tensor(g: &GuidanceStack, window: HuWindow) -> Result<Tensor> {
    Tensor::new(
        vec![g.channels.len(), g.height(), g.width()],
        window.normalize_slice(&g.values()),
    )
}

/// Writes `n_phantoms` volumes, their full truth masks and the truth of
/// the 2.5D slab each volume yields.
pub fn run_phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = phantom_corpus(cfg.pipeline.n_phantoms, &cfg.phantom, cfg.phantom.seed)?;
    for (i, p) in corpus.iter().enumerate() {
        p.volume.save(&out.join(name("vol", i, "cs2vol")))?;
        p.truth.save(&out.join(name("truth", i, "cs2msk")))?;
        let slab = select_2_5d(&p.volume)?;
        p.truth
            .select(&slab.source_slices())?
            .save(&out.join(name("slab_truth", i, "cs2msk")))?;
    }
    echo_config(cfg, out)
}

/// Clusters every channel of every volume's 2.5D slab.
pub fn run_maskgen(cfg: &RunConfig, volumes: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let window = cfg.gan.window;
    for (i, _, path) in indexed(volumes, "vol", "cs2vol")? {
        let vol = load_volume(&path)?;
        let slab = select_2_5d(&vol)?;
        let (h, w) = (slab.height(), slab.width());
        let mut planes = Vec::with_capacity(SLAB_CHANNELS);
        for c in 0..SLAB_CHANNELS {
            let image = window.normalize_slice(slab.channel(c));
            let seed = derive_item_seed(cfg.maskgen_seed(), (i * SLAB_CHANNELS + c) as u64);
            let res = train_unsupervised(&image, h, w, &cfg.maskgen, seed)?;
            write_file(
                &out.join(format!("trace_{i:04}_c{c}.csv")),
                res.trace_csv().as_bytes(),
            )?;
            planes.push(res.mask.to_compact_u8()?);
        }
        let mut mask = LabelVolume::from_planes(&planes, h, w)?;
        mask.spacing = vol.spacing;
        mask.source_slices = Some(slab.source_slices().to_vec());
        mask.save(&out.join(name("mask", i, "cs2msk")))?;

        let channels: Vec<&[f64]> = (0..SLAB_CHANNELS).map(|c| slab.channel(c)).collect();
        let mut slab_vol = HuVolume::from_float_slices(&channels, h, w, vol.spacing)?;
        slab_vol.source_slices = Some(slab.source_slices().to_vec());
        slab_vol.save(&out.join(name("slab", i, "cs2vol")))?;
    }
    echo_config(cfg, out)
}

fn guidance_from(mask: &LabelVolume, slab: &HuVolume) -> Result<GuidanceStack> {
    if (mask.n_slices(), mask.height(), mask.width()) != (slab.n_slices(), slab.height(), slab.width()) {
        return Err(Error::shape("guide", "mask and slab differ in shape"));
    }
    let channels = (0..mask.n_slices())
        .map(|c| {
            let cm = ClusterMask::new(
                mask.height(),
                mask.width(),
                mask.slice(c).iter().map(|&l| l as usize).collect(),
            )?;
            let hu: Vec<f64> = slab.slice(c).iter().map(|&v| f64::from(v)).collect();
            mean_hu_assignment(&cm, &hu)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stack = GuidanceStack::new(channels)?;
    stack.spacing = slab.spacing;
    stack.source_slices = slab.source_slices.clone();
    Ok(stack)
}

/// Mean-HU guidance for every `mask_*` / `slab_*` pair, with optional edits.
pub fn run_guide(
    cfg: &RunConfig,
    masks: &Path,
    slabs: &Path,
    edits: Option<&Path>,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let edits: Vec<EditOp> = match edits {
        Some(p) => load_edits(p)?,
        None => Vec::new(),
    };
    for (i, _, path) in indexed(masks, "mask", "cs2msk")? {
        let mask = load_labels(&path)?;
        let slab = load_volume(&require(slabs.join(name("slab", i, "cs2vol")))?)?;
        let stack = guidance_from(&mask, &slab)?.apply_edits(&edits)?;
        stack.save(&out.join(name("guide", i, "cs2gdf")))?;
    }
    echo_config(cfg, out)
}

/// Guidance stacks with their indices.
fn load_guides(dir: &Path) -> Result<Vec<(usize, GuidanceStack)>> {
    indexed(dir, "guide", "cs2gdf")?
        .into_iter()
        .map(|(i, _, p)| Ok((i, GuidanceStack::load(&p)?)))
        .collect()
}

fn load_slab(dir: &Path, i: usize) -> Result<HuVolume> {
    load_volume(&require(dir.join(name("slab", i, "cs2vol")))?)
}

/// Each guidance map paired with the slab it was derived from.
pub fn load_gan_corpus(guides: &Path, slabs: &Path, window: HuWindow) -> Result<Vec<GanItem>> {
    load_guides(guides)?
        .into_iter()
        .map(|(i, g)| {
            Ok(GanItem {
                guidance: guide_tensor(&g, window)?,
                reference: slab_tensor(&load_slab(slabs, i)?, window)?,
            })
        })
        .collect()
}

/// Trains the GAN. On divergence the last good checkpoint and the log are
/// still written before the error is returned.
pub fn run_train_gan(cfg: &RunConfig, guides: &Path, slabs: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = load_gan_corpus(guides, slabs, cfg.gan.window)?;
    let mut trainer = GanTrainer::new(&cfg.gan)?;
    let result = trainer.run(&corpus);
    trainer.checkpoint().save(&out.join("gan.ckpt"))?;
    write_file(&out.join("train_log.csv"), trainer.log_csv().as_bytes())?;
    echo_config(cfg, out)?;
    result
}

fn load_generator(cfg: &RunConfig, ckpt: &Path) -> Result<Generator> {
    let c = GanCheckpoint::load(ckpt)?;
    c.require_compatible(&cfg.gan)?;
    Ok(c.generator)
}

/// Reference slab for the `k`-th synthesis from guidance at position `p`:
/// always a different item when more than one exists.
fn reference_index(indices: &[usize], p: usize, k: usize) -> usize {
    let n = indices.len();
    if n == 1 {
        indices[0]
    } else {
        indices[(p + 1 + k % (n - 1)) % n]
    }
}

fn hu_volume(image_hu: &Tensor, like: &GuidanceStack) -> Result<HuVolume> {
    let (c, h, w) = image_hu.dims3()?;
    let planes: Vec<&[f64]> = (0..c).map(|i| image_hu.channel(i)).collect::<Result<_>>()?;
    let mut v = HuVolume::from_float_slices(&planes, h, w, like.spacing)?;
    v.source_slices = like.source_slices.clone();
    Ok(v)
}

/// `synth_per_guidance` images per guidance input plus their decoder features.
pub fn run_synth(cfg: &RunConfig, ckpt: &Path, guides: &Path, slabs: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let gen = load_generator(cfg, ckpt)?;
    let window = cfg.gan.window;
    let guides = load_guides(guides)?;
    let indices: Vec<usize> = guides.iter().map(|(i, _)| *i).collect();
    for (p, (i, g)) in guides.iter().enumerate() {
        let gt = guide_tensor(g, window)?;
        for k in 0..cfg.pipeline.synth_per_guidance {
            let r = slab_tensor(&load_slab(slabs, reference_index(&indices, p, k))?, window)?;
            let rec = synthesize(&gen, &gt, &r, window)?;
            hu_volume(&rec.image_hu, g)?.save(&out.join(name_k("synth", *i, k, "cs2vol")))?;
            extract_pixel_features(&rec)?.save(&out.join(name_k("synth", *i, k, "cs2fea")))?;
        }
    }
    echo_config(cfg, out)
}

/// `features labels` path pairs, one per line; relative paths resolve
/// against the list's directory.
pub fn parse_labeled_list(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(f), Some(l), None) => pairs.push((base.join(f), base.join(l))),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{} line {}: expected '<features> <labels>'",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no labeled images", path.display())));
    }
    Ok(pairs)
}

/// The first `n_labeled` guidance inputs (first synthesis of each), labeled
/// with the phantom truth of their source slab.
pub fn default_labeled_list(cfg: &RunConfig, synth: &Path, truth: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let feats: Vec<_> = indexed(synth, "synth", "cs2fea")?
        .into_iter()
        .filter(|(_, k, _)| *k == Some(0))
        .take(cfg.pipeline.n_labeled)
        .collect();
    feats
        .into_iter()
        .map(|(i, _, f)| Ok((f, require(truth.join(name("slab_truth", i, "cs2msk")))?)))
        .collect()
}

/// Trains the ensemble on labeled synthetic images.
pub fn run_train_seg(
    cfg: &RunConfig,
    ckpt: &Path,
    labeled: &[(PathBuf, PathBuf)],
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let gen = load_generator(cfg, ckpt)?;
    let mut feats = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    for (f, l) in labeled {
        let fs = FeatureStack::load(f)?;
        if fs.dim() != gen.decoder_width_sum() {
            return Err(Error::CheckpointMismatch(format!(
                "{} has {} features but the generator's decoder yields {}",
                f.display(),
                fs.dim(),
                gen.decoder_width_sum()
            )));
        }
        feats.push(fs);
        labels.push(load_labels(l)?);
    }
    let ens = train_ensemble(&feats, &labels, &cfg.ensemble)?;
    ens.save(&out.join("ensemble.ckpt"))?;
    let list: String = labeled
        .iter()
        .map(|(f, l)| format!("{} {}\n", f.display(), l.display()))
        .collect();
    write_file(&out.join("labeled.txt"), list.as_bytes())?;
    echo_config(cfg, out)
}

/// Simultaneous synthesis: image and cleaned mask for every guidance input.
#[allow(clippy::too_many_arguments)]
pub fn run_infer(
    cfg: &RunConfig,
    gan_ckpt: &Path,
    ens_ckpt: &Path,
    guides: &Path,
    slabs: &Path,
    edits: Option<&Path>,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let gen = load_generator(cfg, gan_ckpt)?;
    let ens = EnsembleSegmenter::load(ens_ckpt)?;
    if ens.feature_dim() != gen.decoder_width_sum() {
        return Err(Error::CheckpointMismatch(format!(
            "ensemble expects {} features, generator yields {}",
            ens.feature_dim(),
            gen.decoder_width_sum()
        )));
    }
    let edits: Vec<EditOp> = match edits {
        Some(p) => load_edits(p)?,
        None => Vec::new(),
    };
    let window = cfg.gan.window;
    let guides = load_guides(guides)?;
    let indices: Vec<usize> = guides.iter().map(|(i, _)| *i).collect();
    for (p, (i, g)) in guides.iter().enumerate() {
        let g = g.apply_edits(&edits)?;
        let gt = guide_tensor(&g, window)?;
        for k in 0..cfg.pipeline.synth_per_guidance {
            let r = slab_tensor(&load_slab(slabs, reference_index(&indices, p, k))?, window)?;
            let rec = synthesize(&gen, &gt, &r, window)?;
            let pred = ens.predict(&extract_pixel_features(&rec)?)?;
            let (h, w) = (pred.height(), pred.width());
            let planes = (0..pred.n_slices())
                .map(|c| postprocess_components(pred.slice(c), h, w, cfg.pipeline.min_size))
                .collect::<Result<Vec<_>>>()?;
            let mut mask = LabelVolume::from_planes(&planes, h, w)?;
            mask.spacing = g.spacing;
            mask.source_slices = g.source_slices.clone();
            hu_volume(&rec.image_hu, &g)?.save(&out.join(name_k("image", *i, k, "cs2vol")))?;
            mask.save(&out.join(name_k("mask", *i, k, "cs2msk")))?;
        }
    }
    echo_config(cfg, out)
}

/// Pooled Dice of every predicted `mask_NNNN_K` against `slab_truth_NNNN`,
/// as `class,dice` rows for every class.
pub fn run_eval(cfg: &RunConfig, preds: &Path, truth: &Path, report: &Path) -> Result<String> {
    cfg.validate()?;
    let (mut p_all, mut t_all) = (Vec::new(), Vec::new());
    for (i, _, path) in indexed(preds, "mask", "cs2msk")? {
        let p = load_labels(&path)?;
        let t = load_labels(&require(truth.join(name("slab_truth", i, "cs2msk")))?)?;
        if p.labels().len() != t.labels().len() {
            return Err(Error::shape("eval", format!("{} does not match its truth", path.display())));
        }
        p_all.extend_from_slice(p.labels());
        t_all.extend_from_slice(t.labels());
    }
    let mut csv = String::from("class,dice\n");
    for c in 0..cfg.ensemble.n_classes {
        csv.push_str(&format!("{c},{}\n", dice(&p_all, &t_all, c as u8)?));
    }
    write_file(report, csv.as_bytes())?;
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        echo_config(cfg, dir)?;
    }
    Ok(csv)
}
