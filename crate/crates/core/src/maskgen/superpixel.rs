use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMask {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    count: usize,
}

impl SuperpixelMask {
    /// Wraps a labelling; labels must cover `0..count` with no gaps.
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::shape(
                "superpixel_mask",
                format!("{} labels for a {height}x{width} image", labels.len()),
            ));
        }
        let count = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        labels.iter().for_each(|&l| seen[l] = true);
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "superpixel {empty} of {count} is empty"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        self.labels.iter().for_each(|&l| sizes[l] += 1);
        sizes
    }

    /// True when every superpixel is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut components = 0;
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            components += 1;
            flood(start, h, w, &self.labels, &mut seen, |_| {});
        }
        components == self.count
    }
}

fn neighbors(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

fn flood(
    start: usize,
    h: usize,
    w: usize,
    labels: &[usize],
    seen: &mut [bool],
    mut visit: impl FnMut(usize),
) {
    let target = labels[start];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        visit(i);
        for j in neighbors(i, h, w) {
            if !seen[j] && labels[j] == target {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
}

/// Keeps the largest 4-connected piece of every label and grows the kept
/// pieces into the leftovers, then renumbers labels by first appearance.
pub fn enforce_connectivity(labels: &[usize], h: usize, w: usize) -> Result<SuperpixelMask> {
    let n = h * w;
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; n];
    let mut best: Vec<Option<(usize, usize)>> = vec![None; n_labels];
    let mut comp_of = vec![0usize; n];
    let mut comp_id = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut size = 0;
        flood(start, h, w, labels, &mut seen, |i| {
            comp_of[i] = comp_id;
            size += 1;
        });
        let l = labels[start];
        if best[l].is_none_or(|(_, s)| size > s) {
            best[l] = Some((comp_id, size));
        }
        comp_id += 1;
    }
    const UNSET: usize = usize::MAX;
    let mut out = vec![UNSET; n];
    let mut queue = VecDeque::new();
    for i in 0..n {
        if best[labels[i]].map(|(c, _)| c) == Some(comp_of[i]) {
            out[i] = labels[i];
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbors(i, h, w) {
            if out[j] == UNSET {
                out[j] = out[i];
                queue.push_back(j);
            }
        }
    }
    let mut remap = vec![UNSET; n_labels];
    let mut next = 0;
    for l in out.iter_mut() {
        if remap[*l] == UNSET {
            remap[*l] = next;
            next += 1;
        }
        *l = remap[*l];
    }
    SuperpixelMask::new(h, w, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperpixelConfig {
    /// Registry name: `"slic"` or `"grid"`.
    pub kind: String,
    pub n_segments: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        Self {
            kind: "slic".into(),
            n_segments: 100,
            compactness: 10.0,
            iters: 10,
        }
    }
}

pub trait Superpixeler: Send + Sync {
    fn name(&self) -> &'static str;
    fn segment(&self, image: &[f64], height: usize, width: usize) -> Result<SuperpixelMask>;
}

/// `(ny, nx)` grid with `ny * nx <= k` cells of roughly square shape.
fn grid_shape(k: usize, h: usize, w: usize) -> (usize, usize) {
    let ny = ((k as f64 * h as f64 / w as f64).sqrt().floor() as usize).clamp(1, h.min(k));
    let nx = (k / ny).clamp(1, w);
    (ny, nx)
}

fn grid_labels(h: usize, w: usize, ny: usize, nx: usize) -> Vec<usize> {
    (0..h * w)
        .map(|i| ((i / w) * ny / h) * nx + (i % w) * nx / w)
        .collect()
}

fn check_args(n_segments: usize, h: usize, w: usize, image_len: usize) -> Result<()> {
    if image_len != h * w || image_len == 0 {
        return Err(Error::shape(
            "superpixel",
            format!("{image_len} values for a {h}x{w} image"),
        ));
    }
    if n_segments == 0 || n_segments > h * w {
        return Err(Error::InvalidArgument(format!(
            "n_segments = {n_segments} must be in [1, {}] for a {h}x{w} image",
            h * w
        )));
    }
    Ok(())
}

/// Rectangular grid cells; a content-blind baseline.
#[derive(Clone, Debug)]
pub struct GridSuperpixels {
    pub n_segments: usize,
}

impl Superpixeler for GridSuperpixels {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn segment(&self, image: &[f64], h: usize, w: usize) -> Result<SuperpixelMask> {
        check_args(self.n_segments, h, w, image.len())?;
        let (ny, nx) = grid_shape(self.n_segments, h, w);
        SuperpixelMask::new(h, w, grid_labels(h, w, ny, nx))
    }
}

/// Simple linear iterative clustering on a single-channel image.
#[derive(Clone, Debug)]
pub struct Slic {
    pub n_segments: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl Superpixeler for Slic {
    fn name(&self) -> &'static str {
        "slic"
    }

    fn segment(&self, image: &[f64], h: usize, w: usize) -> Result<SuperpixelMask> {
        check_args(self.n_segments, h, w, image.len())?;
        if !(self.compactness > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "compactness must be > 0, got {}",
                self.compactness
            )));
        }
        let (ny, nx) = grid_shape(self.n_segments, h, w);
        let k = ny * nx;
        let step = ((h * w) as f64 / k as f64).sqrt();
        let window = (2.0 * step).ceil() as isize;
        let spatial = (self.compactness / step).powi(2);

        // (y, x, intensity) per centre
        let mut centres: Vec<[f64; 3]> = (0..k)
            .map(|c| {
                let y = ((c / nx) as f64 + 0.5) * h as f64 / ny as f64;
                let x = ((c % nx) as f64 + 0.5) * w as f64 / nx as f64;
                let pix = (y.floor() as usize).min(h - 1) * w + (x.floor() as usize).min(w - 1);
                [y, x, image[pix]]
            })
            .collect();
        let mut labels = grid_labels(h, w, ny, nx);
        let mut dist = vec![f64::INFINITY; h * w];
        for _ in 0..self.iters {
            dist.fill(f64::INFINITY);
            for (c, ctr) in centres.iter().enumerate() {
                let (cy, cx) = (ctr[0].floor() as isize, ctr[1].floor() as isize);
                for y in (cy - window).max(0)..(cy + window + 1).min(h as isize) {
                    for x in (cx - window).max(0)..(cx + window + 1).min(w as isize) {
                        let i = y as usize * w + x as usize;
                        let dy = y as f64 + 0.5 - ctr[0];
                        let dx = x as f64 + 0.5 - ctr[1];
                        let dc = image[i] - ctr[2];
                        let d = dc * dc + (dy * dy + dx * dx) * spatial;
                        if d < dist[i] {
                            dist[i] = d;
                            labels[i] = c;
                        }
                    }
                }
            }
            let mut acc = vec![[0.0f64; 4]; k];
            for (i, &l) in labels.iter().enumerate() {
                let a = &mut acc[l];
                a[0] += (i / w) as f64 + 0.5;
                a[1] += (i % w) as f64 + 0.5;
                a[2] += image[i];
                a[3] += 1.0;
            }
            for (ctr, a) in centres.iter_mut().zip(&acc) {
                if a[3] > 0.0 {
                    *ctr = [a[0] / a[3], a[1] / a[3], a[2] / a[3]];
                }
            }
        }
        enforce_connectivity(&labels, h, w)
    }
}

fn slic(cfg: &SuperpixelConfig) -> Result<Box<dyn Superpixeler>> {
    Ok(Box::new(Slic {
        n_segments: cfg.n_segments,
        compactness: cfg.compactness,
        iters: cfg.iters,
    }))
}

fn grid(cfg: &SuperpixelConfig) -> Result<Box<dyn Superpixeler>> {
    Ok(Box::new(GridSuperpixels {
        n_segments: cfg.n_segments,
    }))
}

pub fn superpixel_registry() -> Registry<dyn Superpixeler, SuperpixelConfig> {
    Registry::new("superpixel").with("slic", slic).with("grid", grid)
}

pub fn build_superpixeler(cfg: &SuperpixelConfig) -> Result<Box<dyn Superpixeler>> {
    superpixel_registry().create(&cfg.kind, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(image: &[f64], h: usize, w: usize, k: usize) -> SuperpixelMask {
        Slic {
            n_segments: k,
            compactness: 10.0,
            iters: 10,
        }
        .segment(image, h, w)
        .unwrap()
    }

    #[test]
    fn single_segment_covers_image() {
        let m = run(&[0.3; 64], 8, 8, 1);
        assert_eq!(m.count(), 1);
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn uniform_image_gives_quadrants() {
        let m = run(&[1.0; 256], 16, 16, 4);
        assert_eq!(m.count(), 4);
        for s in m.sizes() {
            assert!((48..=80).contains(&s), "{:?}", m.sizes());
        }
    }

    #[test]
    fn follows_intensity_edge() {
        // left half dark, right half bright, 2 segments
        let (h, w) = (12, 12);
        let img: Vec<f64> = (0..h * w).map(|i| if i % w < 6 { 0.0 } else { 100.0 }).collect();
        let m = run(&img, h, w, 2);
        for i in 0..h * w {
            assert_eq!(m.labels()[i], m.labels()[i - i % w + if i % w < 6 { 0 } else { 11 }]);
        }
    }

    #[test]
    fn too_many_segments_rejected() {
        let err = Slic {
            n_segments: 65,
            compactness: 10.0,
            iters: 1,
        }
        .segment(&[0.0; 64], 8, 8)
        .unwrap_err();
        assert!(err.to_string().contains("n_segments"), "{err}");
    }

    #[test]
    fn registry_lookup() {
        let cfg = SuperpixelConfig {
            kind: "grid".into(),
            n_segments: 4,
            ..Default::default()
        };
        let sp = build_superpixeler(&cfg).unwrap();
        assert_eq!(sp.name(), "grid");
        assert_eq!(sp.segment(&[0.0; 16], 4, 4).unwrap().count(), 4);
        let bad = SuperpixelConfig {
            kind: "watershed".into(),
            ..cfg
        };
        let err = build_superpixeler(&bad).err().unwrap().to_string();
        assert!(err.contains("grid, slic"), "{err}");
    }

    #[test]
    fn connectivity_splits_fragments() {
        // label 0 appears in two disjoint pieces
        let labels = vec![0, 1, 0, 0, 1, 0, 0, 1, 1];
        let m = enforce_connectivity(&labels, 3, 3).unwrap();
        assert!(m.is_connected());
        assert!(m.count() <= 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn partition_and_connectivity(
            h in 4usize..20, w in 4usize..20, k in 1usize..30, seed in any::<u64>()
        ) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let img: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..100.0)).collect();
            let k = k.min(h * w);
            let m = run(&img, h, w, k);
            prop_assert_eq!(m.labels().len(), h * w);
            prop_assert!(m.count() <= k);
            prop_assert!(m.sizes().iter().all(|&s| s > 0));
            prop_assert!(m.is_connected());
        }
    }
}
