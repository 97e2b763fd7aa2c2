//! Procedural lung-like CT phantoms with exact ground-truth labels.
//!
//! Geometry: an elliptical body of soft tissue, two lung ellipses whose size
//! varies smoothly along z, and a few ground-glass blobs (ellipsoids with a
//! perturbed, Gaussian-smoothed outline) clipped to the lungs. Air outside
//! the body is noise-free; tissue inside it carries additive Gaussian noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volumes::{HuVolume, LabelVolume, Spacing, HU_MAX, HU_MIN};

pub const BACKGROUND: u8 = 0;
pub const BODY: u8 = 1;
pub const LUNG: u8 = 2;
pub const GGO: u8 = 3;
pub const CLASS_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub mean: f64,
    /// Class-specific noise on top of `noise_std`.
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueTable {
    pub background: Tissue,
    pub body: Tissue,
    pub lung: Tissue,
    pub ggo: Tissue,
}

impl TissueTable {
    pub fn get(&self, class: u8) -> Tissue {
        match class {
            BACKGROUND => self.background,
            BODY => self.body,
            LUNG => self.lung,
            _ => self.ggo,
        }
    }
}

impl Default for TissueTable {
    fn default() -> Self {
        let t = |mean| Tissue { mean, std: 0.0 };
        Self {
            background: t(-1024.0),
            body: t(40.0),
            lung: t(-800.0),
            ggo: t(-600.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub n_ggo_min: usize,
    pub n_ggo_max: usize,
    pub tissue: TissueTable,
    pub noise_std: f64,
    /// Body semi-axes `(y, x)` as fractions of the half image size.
    pub body_axes: (f64, f64),
    /// Lung semi-axes `(y, x)` as fractions of the body semi-axes.
    pub lung_axes: (f64, f64),
    /// Lung centre offset from the midline, as a fraction of the body x semi-axis.
    pub lung_offset: f64,
    /// Relative random jitter applied to all of the above per phantom.
    pub jitter: f64,
    /// In-plane GGO radius range as fractions of the image width.
    pub ggo_radius: (f64, f64),
    /// GGO z radius range as fractions of `n_slices`.
    pub ggo_depth: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            n_slices: 32,
            n_ggo_min: 1,
            n_ggo_max: 3,
            tissue: TissueTable::default(),
            noise_std: 30.0,
            body_axes: (0.70, 0.88),
            lung_axes: (0.62, 0.36),
            lung_offset: 0.46,
            jitter: 0.06,
            ggo_radius: (0.08, 0.15),
            ggo_depth: (0.15, 0.30),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let hu = f64::from(HU_MIN)..=f64::from(HU_MAX);
        for (name, t) in [
            ("background", self.tissue.background),
            ("body", self.tissue.body),
            ("lung", self.tissue.lung),
            ("ggo", self.tissue.ggo),
        ] {
            if !hu.contains(&t.mean) || t.std < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "tissue '{name}' has mean {} / std {} outside the HU range",
                    t.mean, t.std
                )));
            }
        }
        if self.n_ggo_min > self.n_ggo_max {
            return Err(Error::InvalidArgument("n_ggo_min exceeds n_ggo_max".into()));
        }
        if self.height < 8 || self.width < 8 || self.n_slices == 0 {
            return Err(Error::InvalidArgument(format!(
                "phantom size {}x{}x{} is too small",
                self.n_slices, self.height, self.width
            )));
        }
        if !(self.noise_std >= 0.0) || !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::InvalidArgument(
                "noise_std must be >= 0 and jitter in [0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPhantom {
    pub volume: HuVolume,
    pub truth: LabelVolume,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            ry: self.ry * s,
            rx: self.rx * s,
            ..*self
        }
    }
}

struct Blob {
    cz: f64,
    rz: f64,
    outline: Ellipse,
    // low-order radial perturbation: (amplitude, phase) for harmonics 2 and 3
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.cz) / self.rz;
        let shrink = (1.0 - dz * dz).max(0.0).sqrt();
        if shrink <= 0.0 {
            return false;
        }
        let e = self.outline.scaled(shrink);
        let theta = (y - e.cy).atan2(x - e.cx);
        let r = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, (a, p))| a * ((k as f64 + 2.0) * theta + p).cos())
                .sum::<f64>();
        e.scaled(r).contains(y, x)
    }
}

fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (sy, sx) = if horizontal { (y, x + off) } else { (y + off, x) };
                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<LabeledPhantom> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let (h, w, n) = (spec.height, spec.width, spec.n_slices);
    let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
    let jit = |rng: &mut rand_chacha::ChaCha8Rng| 1.0 + rng.gen_range(-1.0..=1.0) * spec.jitter;

    let body = Ellipse {
        cy: hh + rng.gen_range(-1.0..=1.0) * spec.jitter * hh,
        cx: hw + rng.gen_range(-1.0..=1.0) * spec.jitter * hw,
        ry: spec.body_axes.0 * hh * jit(&mut rng),
        rx: spec.body_axes.1 * hw * jit(&mut rng),
    };
    let lungs: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipse {
            cy: body.cy + rng.gen_range(-1.0..=1.0) * spec.jitter * body.ry,
            cx: body.cx + side * spec.lung_offset * body.rx * jit(&mut rng),
            ry: spec.lung_axes.0 * body.ry * jit(&mut rng),
            rx: spec.lung_axes.1 * body.rx * jit(&mut rng),
        })
        .collect();

    for (i, lung) in lungs.iter().enumerate() {
        let fits = (0..72).all(|k| {
            let t = k as f64 * 2.0 * PI / 72.0;
            let (y, x) = (lung.cy + lung.ry * t.sin(), lung.cx + lung.rx * t.cos());
            body.contains(y, x)
        });
        if !fits {
            return Err(Error::InvalidArgument(format!(
                "phantom geometry cannot fit: lung {i} extends beyond the body"
            )));
        }
    }
    let (lbody, rbody) = (body.cx - body.rx, body.cx + body.rx);
    if lbody < 0.0 || rbody > w as f64 || body.cy - body.ry < 0.0 || body.cy + body.ry > h as f64 {
        return Err(Error::InvalidArgument(
            "phantom geometry cannot fit: body extends beyond the image".into(),
        ));
    }

    // lung cross-section varies smoothly with z
    let lung_scale = |z: usize| 0.75 + 0.25 * (PI * (z as f64 + 0.5) / n as f64).sin();

    let n_ggo = rng.gen_range(spec.n_ggo_min..=spec.n_ggo_max);
    let blobs: Vec<Blob> = (0..n_ggo)
        .map(|_| {
            let lung = lungs[rng.gen_range(0..lungs.len())];
            let t = rng.gen_range(0.0..2.0 * PI);
            let rho = rng.gen_range(0.0..0.6f64).sqrt();
            let r = rng.gen_range(spec.ggo_radius.0..=spec.ggo_radius.1) * w as f64;
            Blob {
                cz: rng.gen_range(0.3..0.7) * n as f64,
                rz: (rng.gen_range(spec.ggo_depth.0..=spec.ggo_depth.1) * n as f64).max(1.0),
                outline: Ellipse {
                    cy: lung.cy + rho * lung.ry * t.sin(),
                    cx: lung.cx + rho * lung.rx * t.cos(),
                    ry: r * rng.gen_range(0.7..1.3),
                    rx: r * rng.gen_range(0.7..1.3),
                },
                harmonics: [
                    (rng.gen_range(0.0..0.15), rng.gen_range(0.0..2.0 * PI)),
                    (rng.gen_range(0.0..0.10), rng.gen_range(0.0..2.0 * PI)),
                ],
            }
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut voxels = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for z in 0..n {
        let s = lung_scale(z);
        let mut blob_field = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if blobs.iter().any(|b| b.contains(z as f64 + 0.5, py, px)) {
                    blob_field[y * w + x] = 1.0;
                }
            }
        }
        let smooth = gaussian_blur(&blob_field, h, w, 1.0);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let class = if !body.contains(py, px) {
                    BACKGROUND
                } else if lungs.iter().any(|l| l.scaled(s).contains(py, px)) {
                    if smooth[y * w + x] >= 0.5 {
                        GGO
                    } else {
                        LUNG
                    }
                } else {
                    BODY
                };
                let tissue = spec.tissue.get(class);
                let global = if class == BACKGROUND { 0.0 } else { spec.noise_std };
                let std = (global * global + tissue.std * tissue.std).sqrt();
                let hu = if std > 0.0 {
                    tissue.mean + std * noise.sample(&mut rng)
                } else {
                    tissue.mean
                };
                voxels.push(hu.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16);
                labels.push(class);
            }
        }
    }
    let spacing = Spacing::default();
    let volume = HuVolume::new(n, h, w, voxels, spacing)?;
    let mut truth = LabelVolume::new(n, h, w, labels)?;
    truth.spacing = spacing;
    Ok(LabeledPhantom { volume, truth })
}

/// `n` phantoms with seeds `seed0 .. seed0 + n`.
pub fn phantom_corpus(n: usize, template: &PhantomSpec, seed0: u64) -> Result<Vec<LabeledPhantom>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be >= 1".into()));
    }
    (0..n as u64)
        .map(|i| {
            let spec = PhantomSpec {
                seed: seed0.wrapping_add(i),
                ..template.clone()
            };
            generate_phantom(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            height: 32,
            width: 32,
            n_slices: 12,
            ..Default::default()
        }
    }

    #[test]
    fn no_lesions_requested() {
        let spec = PhantomSpec {
            n_ggo_min: 0,
            n_ggo_max: 0,
            ..small()
        };
        let p = generate_phantom(&spec).unwrap();
        assert!(!p.truth.labels().contains(&GGO));
        assert!(p.truth.labels().contains(&LUNG));
    }

    #[test]
    fn noiseless_values_equal_means() {
        let spec = PhantomSpec {
            noise_std: 0.0,
            ..small()
        };
        let p = generate_phantom(&spec).unwrap();
        for (v, l) in p.volume.voxels().iter().zip(p.truth.labels()) {
            assert_eq!(f64::from(*v), spec.tissue.get(*l).mean);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn ggo_only_inside_lungs_geometry() {
        for seed in 0..20 {
            let p = generate_phantom(&PhantomSpec { seed, ..small() }).unwrap();
            assert_eq!(p.truth.labels().len(), p.volume.voxels().len());
            // GGO voxels are never outside the body and background is pure air
            for (v, l) in p.volume.voxels().iter().zip(p.truth.labels()) {
                if *l == BACKGROUND {
                    assert_eq!(*v, -1024);
                }
            }
        }
    }

    #[test]
    fn lungs_larger_than_body_rejected() {
        let spec = PhantomSpec {
            lung_axes: (1.3, 0.9),
            ..small()
        };
        let err = generate_phantom(&spec).unwrap_err().to_string();
        assert!(err.contains("cannot fit"), "{err}");
    }

    #[test]
    fn invalid_tissue_rejected() {
        let mut spec = small();
        spec.tissue.ggo.mean = -5000.0;
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn corpus_seeds() {
        let c = phantom_corpus(1, &small(), 9).unwrap();
        assert_eq!(c[0], generate_phantom(&PhantomSpec { seed: 9, ..small() }).unwrap());
        assert!(phantom_corpus(0, &small(), 0).is_err());
    }
}
