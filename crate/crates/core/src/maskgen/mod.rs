//! Unsupervised structural masks: superpixels, a per-image clustering CNN
//! trained against its own superpixel-refined argmax, and the stopping rule.

mod superpixel;
mod unsup;

pub use superpixel::{
    build_superpixeler, enforce_connectivity, superpixel_registry, GridSuperpixels, Slic,
    Superpixeler, SuperpixelConfig, SuperpixelMask,
};
pub use unsup::{train_unsupervised, IterationRecord, UnsupConfig, UnsupResult};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMask {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    distinct_count: usize,
}

impl ClusterMask {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "cluster_mask",
                format!("{} labels for a {height}x{width} image", labels.len()),
            ));
        }
        let distinct_count = distinct(&labels);
        Ok(Self {
            height,
            width,
            labels,
            distinct_count,
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

    pub fn distinct_count(&self) -> usize {
        self.distinct_count
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Labels as bytes, renumbered `0..distinct_count` in ascending order.
    pub fn to_compact_u8(&self) -> Result<Vec<u8>> {
        let classes = self.classes();
        if classes.len() > 256 {
            return Err(Error::InvalidArgument(format!(
                "{} clusters do not fit in 8-bit labels",
                classes.len()
            )));
        }
        Ok(self
            .labels
            .iter()
            .map(|l| classes.binary_search(l).expect("present label") as u8)
            .collect())
    }
}

fn distinct(labels: &[usize]) -> usize {
    let mut c = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Assigns every superpixel the most frequent cluster label inside it,
/// breaking ties toward the lowest label.
pub fn refine_with_superpixels(c: &ClusterMask, s: &SuperpixelMask) -> Result<ClusterMask> {
    if c.height != s.height() || c.width != s.width() {
        return Err(Error::shape(
            "refine_with_superpixels",
            format!(
                "cluster mask {}x{} vs superpixels {}x{}",
                c.height,
                c.width,
                s.height(),
                s.width()
            ),
        ));
    }
    let m = c.labels.iter().max().map_or(0, |v| v + 1);
    let mut counts = vec![0usize; s.count() * m];
    for (&sp, &cl) in s.labels().iter().zip(&c.labels) {
        counts[sp * m + cl] += 1;
    }
    let modes: Vec<usize> = counts
        .chunks(m.max(1))
        .map(|row| {
            // first maximum wins, i.e. the lowest label
            let mut best = 0;
            for (k, &n) in row.iter().enumerate() {
                if n > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    ClusterMask::new(
        c.height,
        c.width,
        s.labels().iter().map(|&sp| modes[sp]).collect(),
    )
}
