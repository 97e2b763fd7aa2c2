//! HU volumes, label volumes, the 2.5D four-slice selection rule and HU
//! windowing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, check_len, join_list, Header};
use crate::numerics::Tensor;

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

pub const VOLUME_MAGIC: &str = "CS2VOL1";
pub const MASK_MAGIC: &str = "CS2MSK1";

/// Number of slices stacked into a 2.5D slab.
pub const SLAB_CHANNELS: usize = 4;

/// Voxel spacing `(dz, dy, dx)` in millimetres. Metadata only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self {
            dz: 1.0,
            dy: 0.6875,
            dx: 0.6875,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    /// Header + little-endian `i16` payload.
    Cs2Vol1,
}

pub(crate) fn shape_header(magic: &str, n: usize, h: usize, w: usize, sp: Spacing) -> Header {
    let mut hd = Header::new(magic);
    hd.set("n_slices", n)
        .set("height", h)
        .set("width", w)
        .set("dz", sp.dz)
        .set("dy", sp.dy)
        .set("dx", sp.dx);
    hd
}

pub(crate) fn read_shape(hd: &Header) -> Result<(usize, usize, usize, Spacing)> {
    let n = hd.parse("n_slices")?;
    let h = hd.parse("height")?;
    let w = hd.parse("width")?;
    let sp = Spacing {
        dz: hd.parse("dz")?,
        dy: hd.parse("dy")?,
        dx: hd.parse("dx")?,
    };
    Ok((n, h, w, sp))
}

pub(crate) fn read_source_slices(hd: &Header) -> Result<Option<Vec<usize>>> {
    match hd.get("source_slices") {
        None => Ok(None),
        Some(_) => hd.parse_list("source_slices").map(Some),
    }
}

/// A stack of signed HU slices.
#[derive(Clone, Debug, PartialEq)]
pub struct HuVolume {
    n_slices: usize,
    height: usize,
    width: usize,
    voxels: Vec<i16>,
    pub spacing: Spacing,
    /// Indices into an originating volume when this is a derived slab.
    pub source_slices: Option<Vec<usize>>,
}

impl HuVolume {
    pub fn new(
        n_slices: usize,
        height: usize,
        width: usize,
        voxels: Vec<i16>,
        spacing: Spacing,
    ) -> Result<Self> {
        check_len(voxels.len() * 2, n_slices * height * width * 2)?;
        if let Some((index, v)) = voxels
            .iter()
            .enumerate()
            .find(|(_, v)| !(HU_MIN..=HU_MAX).contains(*v))
        {
            return Err(Error::HuOutOfRange {
                index,
                value: f64::from(*v),
            });
        }
        Ok(Self {
            n_slices,
            height,
            width,
            voxels,
            spacing,
            source_slices: None,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.height * self.width;
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut hd = shape_header(
            VOLUME_MAGIC,
            self.n_slices,
            self.height,
            self.width,
            self.spacing,
        );
        if let Some(src) = &self.source_slices {
            hd.set("source_slices", join_list(src));
        }
        let payload: Vec<u8> = self.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        hd.encode(&payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hd, payload) = Header::decode(bytes, VOLUME_MAGIC)?;
        let (n, h, w, sp) = read_shape(&hd)?;
        check_len(payload.len(), n * h * w * 2)?;
        let voxels = payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        let mut v = Self::new(n, h, w, voxels, sp)?;
        v.source_slices = read_source_slices(&hd)?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes())
    }

    /// Builds a volume from float HU planes, rounding and clamping into range.
    pub fn from_float_slices(
        planes: &[&[f64]],
        height: usize,
        width: usize,
        spacing: Spacing,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            check_len(p.len(), height * width)?;
            voxels.extend(p.iter().map(|v| {
                v.round()
                    .clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16
            }));
        }
        Self::new(planes.len(), height, width, voxels, spacing)
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<HuVolume> {
    match format {
        VolumeFormat::Cs2Vol1 => HuVolume::from_bytes(&format::read_file(path)?),
    }
}

/// Integer labels per voxel, stored as `u8`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    n_slices: usize,
    height: usize,
    width: usize,
    labels: Vec<u8>,
    pub spacing: Spacing,
    pub source_slices: Option<Vec<usize>>,
}

impl LabelVolume {
    pub fn new(n_slices: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        check_len(labels.len(), n_slices * height * width)?;
        Ok(Self {
            n_slices,
            height,
            width,
            labels,
            spacing: Spacing::default(),
            source_slices: None,
        })
    }

    /// Stacks equally sized label planes.
    pub fn from_planes(planes: &[Vec<u8>], height: usize, width: usize) -> Result<Self> {
        let mut labels = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            check_len(p.len(), height * width)?;
            labels.extend_from_slice(p);
        }
        Self::new(planes.len(), height, width, labels)
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.labels[z * n..(z + 1) * n]
    }

    /// Picks `indices` slices into a new volume that remembers them.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_slices) {
            return Err(Error::InvalidArgument(format!(
                "slice {bad} requested from a {}-slice label volume",
                self.n_slices
            )));
        }
        let planes: Vec<Vec<u8>> = indices.iter().map(|&i| self.slice(i).to_vec()).collect();
        let mut out = Self::from_planes(&planes, self.height, self.width)?;
        out.spacing = self.spacing;
        out.source_slices = Some(indices.to_vec());
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut hd = shape_header(
            MASK_MAGIC,
            self.n_slices,
            self.height,
            self.width,
            self.spacing,
        );
        if let Some(src) = &self.source_slices {
            hd.set("source_slices", join_list(src));
        }
        hd.encode(&self.labels)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hd, payload) = Header::decode(bytes, MASK_MAGIC)?;
        let (n, h, w, sp) = read_shape(&hd)?;
        check_len(payload.len(), n * h * w)?;
        let mut v = Self::new(n, h, w, payload.to_vec())?;
        v.spacing = sp;
        v.source_slices = read_source_slices(&hd)?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read_file(path)?)
    }
}

/// Four HU planes stacked channel-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Slab {
    height: usize,
    width: usize,
    values: Vec<f64>,
    source_slices: [usize; SLAB_CHANNELS],
}

impl Slab {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        source_slices: [usize; SLAB_CHANNELS],
    ) -> Result<Self> {
        check_len(values.len(), SLAB_CHANNELS * height * width)?;
        if source_slices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(format!(
                "slab source slices {:?} are not strictly increasing",
                source_slices
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            source_slices,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_slices(&self) -> [usize; SLAB_CHANNELS] {
        self.source_slices
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![SLAB_CHANNELS, self.height, self.width],
            self.values.clone(),
        )
        .expect("slab layout")
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Slab {
        Slab {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// 0-indexed slice indices of the 2.5D selection for an `n`-slice volume.
///
/// `lower = floor(0.25 (n-1))`, `upper = ceil(0.75 (n-1))`,
/// `step = floor((upper - lower) / 4)`, indices `lower + k step`.
pub fn slab_indices(n: usize) -> Result<[usize; SLAB_CHANNELS]> {
    if n == 0 {
        return Err(Error::TooThin { n_slices: 0, min: 7 });
    }
    let last = n - 1;
    // exact integer forms of floor(last/4) and ceil(3 last/4)
    let lower = last / 4;
    let upper = (3 * last).div_ceil(4);
    let step = (upper - lower) / 4;
    if step == 0 {
        // smallest n whose step is at least 1
        let min = (1..).find(|&m: &usize| {
            let l = m - 1;
            ((3 * l).div_ceil(4) - l / 4) / 4 >= 1
        });
        return Err(Error::TooThin {
            n_slices: n,
            min: min.expect("unbounded search"),
        });
    }
    Ok(std::array::from_fn(|k| lower + k * step))
}

pub fn select_2_5d(volume: &HuVolume) -> Result<Slab> {
    let idx = slab_indices(volume.n_slices())?;
    let mut values = Vec::with_capacity(SLAB_CHANNELS * volume.height() * volume.width());
    for &z in &idx {
        values.extend(volume.slice(z).iter().map(|&v| f64::from(v)));
    }
    Slab::new(volume.height(), volume.width(), values, idx)
}

/// Closed HU interval mapped affinely onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self {
            lo: -1024.0,
            hi: 600.0,
        }
    }
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let w = Self { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::InvalidArgument(format!(
                "HU window requires lo < hi, got ({}, {})",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, hu: f64) -> f64 {
        (hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.lo + v * (self.hi - self.lo)
    }

    pub fn normalize_slice(&self, hu: &[f64]) -> Vec<f64> {
        hu.iter().map(|&v| self.normalize(v)).collect()
    }

    pub fn denormalize_slice(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.denormalize(x)).collect()
    }
}

pub fn normalize_hu(slab: &Slab, window: HuWindow) -> Result<Slab> {
    window.validate()?;
    Ok(slab.map(|v| window.normalize(v)))
}

pub fn denormalize_hu(slab: &Slab, window: HuWindow) -> Result<Slab> {
    window.validate()?;
    Ok(slab.map(|v| window.denormalize(v)))
}

/// Writes one plane as a binary 16-bit PGM, mapping `window` onto `0..=65535`.
pub fn write_pgm16(path: &Path, plane: &[f64], height: usize, width: usize, window: HuWindow) -> Result<()> {
    check_len(plane.len(), height * width)?;
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in plane {
        let q = (window.normalize(v) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    format::write_file(path, &bytes)
}

/// Writes a label plane as an 8-bit PGM with labels spread over the gray range.
pub fn write_label_pgm(path: &Path, labels: &[u8], height: usize, width: usize, classes: u8) -> Result<()> {
    check_len(labels.len(), height * width)?;
    let scale = 255 / classes.saturating_sub(1).max(1);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(labels.iter().map(|&l| l.saturating_mul(scale)));
    format::write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_volume_round_trip() {
        let v = HuVolume::new(2, 2, 2, vec![-1024; 8], Spacing::default()).unwrap();
        let back = HuVolume::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back.voxels(), &[-1024; 8]);
        assert_eq!(back, v);
    }

    #[test]
    fn payload_shorter_than_header() {
        let v = HuVolume::new(9, 2, 2, vec![0; 36], Spacing::default()).unwrap();
        let bytes = v.to_bytes();
        let text = String::from_utf8_lossy(&bytes[..40]).replace("n_slices=9", "n_slices=10");
        let mut forged = text.into_bytes();
        forged.extend_from_slice(&bytes[40..]);
        match HuVolume::from_bytes(&forged) {
            Err(Error::SizeMismatch { expected, found }) => {
                assert_eq!((expected, found), (80, 72));
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn error_variants_are_distinct() {
        assert!(matches!(
            HuVolume::from_bytes(b"magic=CS2VOL1\nn_slices=x\n\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            HuVolume::new(1, 1, 1, vec![3072], Spacing::default()),
            Err(Error::HuOutOfRange { index: 0, .. })
        ));
        let mut hd = shape_header(VOLUME_MAGIC, 1, 1, 1, Spacing::default());
        hd.set("dz", 1);
        let bytes = hd.encode(&(-2000i16).to_le_bytes());
        assert!(matches!(
            HuVolume::from_bytes(&bytes),
            Err(Error::HuOutOfRange { .. })
        ));
    }

    #[test]
    fn depth_31_selects_7_11_15_19() {
        assert_eq!(slab_indices(31).unwrap(), [7, 11, 15, 19]);
    }

    #[test]
    fn n9_and_thin_volumes() {
        assert_eq!(slab_indices(9).unwrap(), [2, 3, 4, 5]);
        match slab_indices(5) {
            Err(Error::TooThin { n_slices: 5, min }) => assert_eq!(min, 7),
            other => panic!("{other:?}"),
        }
        assert_eq!(slab_indices(7).unwrap(), [1, 2, 3, 4]);
        for n in 0..7 {
            assert!(slab_indices(n).is_err(), "n = {n}");
        }
    }

    #[test]
    fn window_endpoints_and_clamp() {
        let w = HuWindow::default();
        assert_eq!(w.normalize(-1024.0), 0.0);
        assert_eq!(w.normalize(600.0), 1.0);
        assert_eq!(w.normalize(2000.0), 1.0);
        assert!(HuWindow::new(5.0, 5.0).is_err());
    }

    #[test]
    fn select_stacks_source_slices() {
        let n = 31;
        let voxels: Vec<i16> = (0..n).flat_map(|z| vec![z as i16; 4]).collect();
        let vol = HuVolume::new(n, 2, 2, voxels, Spacing::default()).unwrap();
        let slab = select_2_5d(&vol).unwrap();
        assert_eq!(slab.source_slices(), [7, 11, 15, 19]);
        assert_eq!(slab.channel(2), &[15.0; 4]);
    }

    proptest! {
        #[test]
        fn indices_in_range_and_increasing(n in 9usize..2000) {
            let idx = slab_indices(n).unwrap();
            prop_assert!(idx.iter().all(|&i| i < n));
            prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        }

        #[test]
        fn window_round_trip(v in -1024.0f64..600.0) {
            let w = HuWindow::default();
            prop_assert!((w.denormalize(w.normalize(v)) - v).abs() < 1e-9);
        }

        #[test]
        fn volume_round_trip_is_bit_exact(
            (n, h, w, data) in (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(n, h, w)| {
                (Just(n), Just(h), Just(w), proptest::collection::vec(HU_MIN..=HU_MAX, n * h * w))
            })
        ) {
            let v = HuVolume::new(n, h, w, data, Spacing { dz: 2.5, dy: 0.1, dx: 0.3 }).unwrap();
            let bytes = v.to_bytes();
            let back = HuVolume::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
