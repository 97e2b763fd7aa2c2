//! HU-valued guidance maps built from cluster masks, and declarative edits.
//!
//! Pixel `(row i, col j)` has its centre at `x = j + 0.5`, `y = i + 0.5`;
//! edit geometry uses the same continuous coordinates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, Header};
use crate::maskgen::ClusterMask;
use crate::volumes::{read_shape, read_source_slices, shape_header, Spacing, HU_MAX, HU_MIN};

pub const GUIDANCE_MAGIC: &str = "CS2GDF1";

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    /// Cluster id -> mean HU assigned to it.
    provenance: BTreeMap<usize, f64>,
    /// HU values written by edits, in application order.
    edit_values: Vec<f64>,
}

fn check_hu(value: f64, what: &str) -> Result<()> {
    if !value.is_finite() || value < f64::from(HU_MIN) || value > f64::from(HU_MAX) {
        return Err(Error::InvalidArgument(format!(
            "{what} {value} is outside [{HU_MIN}, {HU_MAX}]"
        )));
    }
    Ok(())
}

impl GuidanceMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        provenance: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "guidance_map",
                format!("{} values for a {height}x{width} map", values.len()),
            ));
        }
        for &v in &values {
            check_hu(v, "guidance value")?;
        }
        Ok(Self {
            height,
            width,
            values,
            provenance,
            edit_values: Vec::new(),
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

    pub fn provenance(&self) -> &BTreeMap<usize, f64> {
        &self.provenance
    }

    pub fn edit_values(&self) -> &[f64] {
        &self.edit_values
    }
}

/// Replaces every pixel by the mean of `image` over its cluster.
pub fn mean_hu_assignment(mask: &ClusterMask, image: &[f64]) -> Result<GuidanceMap> {
    let (h, w) = (mask.height(), mask.width());
    if image.len() != h * w {
        return Err(Error::shape(
            "mean_hu_assignment",
            format!("{} image values for a {h}x{w} mask", image.len()),
        ));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&l, &v) in mask.labels().iter().zip(image) {
        let e = sums.entry(l).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let provenance: BTreeMap<usize, f64> =
        sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect();
    let values = mask.labels().iter().map(|l| provenance[l]).collect();
    GuidanceMap::new(h, w, values, provenance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EditOp {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
        hu: f64,
        /// Slab channel the edit targets; all channels when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<usize>,
    },
    Polygon {
        /// Vertices as `[x, y]`.
        points: Vec<[f64; 2]>,
        hu: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<usize>,
    },
}

impl EditOp {
    pub fn circle(cx: f64, cy: f64, r: f64, hu: f64) -> Self {
        EditOp::Circle {
            cx,
            cy,
            r,
            hu,
            channel: None,
        }
    }

    pub fn polygon(points: Vec<[f64; 2]>, hu: f64) -> Self {
        EditOp::Polygon {
            points,
            hu,
            channel: None,
        }
    }

    pub fn hu(&self) -> f64 {
        match self {
            EditOp::Circle { hu, .. } | EditOp::Polygon { hu, .. } => *hu,
        }
    }

    pub fn channel(&self) -> Option<usize> {
        match self {
            EditOp::Circle { channel, .. } | EditOp::Polygon { channel, .. } => *channel,
        }
    }

    pub fn applies_to(&self, channel: usize) -> bool {
        self.channel().is_none_or(|c| c == channel)
    }

    pub fn validate(&self) -> Result<()> {
        check_hu(self.hu(), "edit HU value")?;
        match self {
            EditOp::Circle { cx, cy, r, .. } => {
                if !(cx.is_finite() && cy.is_finite() && r.is_finite()) || *r < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "circle needs a finite centre and radius >= 0, got ({cx}, {cy}), r = {r}"
                    )));
                }
            }
            EditOp::Polygon { points, .. } => {
                if points.len() < 3 {
                    return Err(Error::InvalidArgument(format!(
                        "polygon needs at least 3 vertices, got {}",
                        points.len()
                    )));
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("polygon vertex is not finite".into()));
                }
            }
        }
        Ok(())
    }

    /// `(x_min, y_min, x_max, y_max)` of the shape.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            EditOp::Circle { cx, cy, r, .. } => (cx - r, cy - r, cx + r, cy + r),
            EditOp::Polygon { points, .. } => points.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), p| (a.min(p[0]), b.min(p[1]), c.max(p[0]), d.max(p[1])),
            ),
        }
    }

    /// Whether the point `(x, y)` lies inside the shape. A zero-radius
    /// circle has no area and contains nothing.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            EditOp::Circle { cx, cy, r, .. } => {
                let (dx, dy) = (x - cx, y - cy);
                *r > 0.0 && dx * dx + dy * dy <= r * r
            }
            EditOp::Polygon { points, .. } => {
                // even-odd ray casting
                let mut inside = false;
                let mut j = points.len() - 1;
                for i in 0..points.len() {
                    let ([xi, yi], [xj, yj]) = (points[i], points[j]);
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }

    /// Row-major indices of the pixels whose centres fall inside the shape,
    /// clipped to an `h x w` image.
    pub fn rasterize(&self, h: usize, w: usize) -> Vec<usize> {
        let (x0, y0, x1, y1) = self.bounds();
        let lo = |v: f64, n: usize| (v - 0.5).floor().clamp(0.0, n as f64) as usize;
        let hi = |v: f64, n: usize| ((v - 0.5).ceil() + 1.0).clamp(0.0, n as f64) as usize;
        let mut out = Vec::new();
        for i in lo(y0, h)..hi(y1, h) {
            for j in lo(x0, w)..hi(x1, w) {
                if self.contains(j as f64 + 0.5, i as f64 + 0.5) {
                    out.push(i * w + j);
                }
            }
        }
        out
    }
}

/// Applies `edits` in order; later shapes overwrite earlier ones.
pub fn apply_edits(gmap: &GuidanceMap, edits: &[EditOp]) -> Result<GuidanceMap> {
    let (h, w) = (gmap.height, gmap.width);
    let mut out = gmap.clone();
    for (k, e) in edits.iter().enumerate() {
        e.validate()
            .map_err(|err| Error::InvalidArgument(format!("edit {k}: {err}")))?;
        let (x0, y0, x1, y1) = e.bounds();
        if x1 < 0.0 || y1 < 0.0 || x0 > w as f64 || y0 > h as f64 {
            return Err(Error::InvalidArgument(format!(
                "edit {k} lies entirely outside the {h}x{w} image"
            )));
        }
        for idx in e.rasterize(h, w) {
            out.values[idx] = e.hu();
        }
        out.edit_values.push(e.hu());
    }
    Ok(out)
}

/// Parses a JSON-lines edit file; blank lines and `#` comments are skipped.
pub fn parse_edits(text: &str) -> Result<Vec<EditOp>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let op: EditOp = serde_json::from_str(l)
                .map_err(|e| Error::Config(format!("edit file line {}: {e}", i + 1)))?;
            op.validate()
                .map_err(|e| Error::Config(format!("edit file line {}: {e}", i + 1)))?;
            Ok(op)
        })
        .collect()
}

pub fn load_edits(path: &Path) -> Result<Vec<EditOp>> {
    let bytes = format::read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    parse_edits(&text)
}

fn encode_provenance(p: &BTreeMap<usize, f64>) -> String {
    p.iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_provenance(raw: &str) -> Result<BTreeMap<usize, f64>> {
    if raw.is_empty() {
        return Ok(BTreeMap::new());
    }
    raw.split(',')
        .map(|item| {
            let bad = || Error::MalformedHeader(format!("bad provenance entry '{item}'"));
            let (k, v) = item.split_once(':').ok_or_else(bad)?;
            Ok((k.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Guidance for every channel of a slab, stacked as slices.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceStack {
    pub channels: Vec<GuidanceMap>,
    pub spacing: Spacing,
    pub source_slices: Option<Vec<usize>>,
}

impl GuidanceStack {
    pub fn new(channels: Vec<GuidanceMap>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidArgument("guidance stack needs a channel".into()))?;
        let (h, w) = (first.height, first.width);
        if channels.iter().any(|c| c.height != h || c.width != w) {
            return Err(Error::shape("guidance_stack", "channels differ in size"));
        }
        Ok(Self {
            channels,
            spacing: Spacing::default(),
            source_slices: None,
        })
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    /// All channel values, channel-major.
    pub fn values(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.values.iter().copied()).collect()
    }

    /// Applies the edits that target each channel.
    pub fn apply_edits(&self, edits: &[EditOp]) -> Result<Self> {
        let channels = self
            .channels
            .iter()
            .enumerate()
            .map(|(c, g)| {
                let own: Vec<EditOp> = edits.iter().filter(|e| e.applies_to(c)).cloned().collect();
                apply_edits(g, &own)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            channels,
            ..self.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut hd = shape_header(
            GUIDANCE_MAGIC,
            self.channels.len(),
            self.height(),
            self.width(),
            self.spacing,
        );
        if let Some(s) = &self.source_slices {
            hd.set("source_slices", format::join_list(s));
        }
        for (c, g) in self.channels.iter().enumerate() {
            hd.set(&format!("provenance{c}"), encode_provenance(&g.provenance));
            hd.set(&format!("edits{c}"), format::join_list(&g.edit_values));
        }
        hd.encode(&format::f64_to_le(&self.values()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hd, payload) = Header::decode(bytes, GUIDANCE_MAGIC)?;
        let (n, h, w, spacing) = read_shape(&hd)?;
        let values = format::f64_from_le(payload, n * h * w)?;
        let channels = values
            .chunks(h * w)
            .enumerate()
            .map(|(c, v)| {
                let mut g = GuidanceMap::new(
                    h,
                    w,
                    v.to_vec(),
                    decode_provenance(hd.require(&format!("provenance{c}"))?)?,
                )?;
                g.edit_values = hd.parse_list(&format!("edits{c}"))?;
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stack = GuidanceStack::new(channels)?;
        stack.spacing = spacing;
        stack.source_slices = read_source_slices(&hd)?;
        Ok(stack)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read_file(path)?)
    }
}
