//! Scalar and label volumes with MetaImage (.mha) persistence.
//!
//! Volumes are dense 3D arrays stored x-fastest. Scalar intensities are held
//! as `f32` regardless of the on-disk element type; label maps keep their
//! integer identity. Only single-file MetaImage ("ElementDataFile = LOCAL")
//! with little-endian raw data is supported.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Interpolation used when sampling at non-integer positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Dense scalar volume. `data[x + dims[0]*(y + dims[1]*z)]`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Physical voxel size in mm per axis.
    pub spacing: [f32; 3],
    /// Physical position of voxel (0,0,0) in mm.
    pub origin: [f32; 3],
    pub data: Vec<f32>,
}

/// Dense label map; voxel values are non-negative label identifiers,
/// 0 meaning background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    pub data: Vec<u32>,
    /// Optional display names keyed by label value.
    pub label_names: BTreeMap<u32, String>,
}

pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            data: vec![0.0; voxel_count(dims)],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Value at clamped integer coordinates; accepts out-of-range indices.
    #[inline]
    pub fn at_clamped(&self, x: i64, y: i64, z: i64) -> f32 {
        let cx = x.clamp(0, self.dims[0] as i64 - 1) as usize;
        let cy = y.clamp(0, self.dims[1] as i64 - 1) as usize;
        let cz = z.clamp(0, self.dims[2] as i64 - 1) as usize;
        self.at(cx, cy, cz)
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.min_max();
        lo == hi
    }

    /// Trilinear sample at a continuous voxel coordinate, clamp-to-edge.
    /// Integer positions return the stored value exactly.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f32 {
        let (base, frac) = self.cell_of(p);
        if frac == [0.0; 3] {
            return self.at(base[0], base[1], base[2]);
        }
        let [x0, y0, z0] = base;
        let x1 = (x0 + 1).min(self.dims[0] - 1);
        let y1 = (y0 + 1).min(self.dims[1] - 1);
        let z1 = (z0 + 1).min(self.dims[2] - 1);
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(self.at(x0, y0, z0) as f64, self.at(x1, y0, z0) as f64, fx);
        let c10 = lerp(self.at(x0, y1, z0) as f64, self.at(x1, y1, z0) as f64, fx);
        let c01 = lerp(self.at(x0, y0, z1) as f64, self.at(x1, y0, z1) as f64, fx);
        let c11 = lerp(self.at(x0, y1, z1) as f64, self.at(x1, y1, z1) as f64, fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz) as f32
    }

    /// Nearest-neighbour sample at a continuous voxel coordinate (round
    /// half up), clamp-to-edge.
    pub fn sample_nearest(&self, p: [f64; 3]) -> f32 {
        let x = (p[0] + 0.5).floor() as i64;
        let y = (p[1] + 0.5).floor() as i64;
        let z = (p[2] + 0.5).floor() as i64;
        self.at_clamped(x, y, z)
    }

    pub fn sample(&self, p: [f64; 3], interp: Interp) -> f32 {
        match interp {
            Interp::Trilinear => self.sample_trilinear(p),
            Interp::Nearest => self.sample_nearest(p),
        }
    }

    /// Trilinear value and its derivative with respect to the sample
    /// position. The derivative is zero along axes where the position is
    /// clamped outside the volume.
    pub fn sample_with_gradient(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let (base, frac) = self.cell_of(p);
        let [x0, y0, z0] = base;
        let x1 = (x0 + 1).min(self.dims[0] - 1);
        let y1 = (y0 + 1).min(self.dims[1] - 1);
        let z1 = (z0 + 1).min(self.dims[2] - 1);
        let [fx, fy, fz] = frac;
        let v = |x: usize, y: usize, z: usize| self.at(x, y, z) as f64;
        let (v000, v100) = (v(x0, y0, z0), v(x1, y0, z0));
        let (v010, v110) = (v(x0, y1, z0), v(x1, y1, z0));
        let (v001, v101) = (v(x0, y0, z1), v(x1, y0, z1));
        let (v011, v111) = (v(x0, y1, z1), v(x1, y1, z1));
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(v000, v100, fx);
        let c10 = lerp(v010, v110, fx);
        let c01 = lerp(v001, v101, fx);
        let c11 = lerp(v011, v111, fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let value = lerp(c0, c1, fz);

        let inside = |axis: usize| p[axis] > 0.0 && p[axis] < (self.dims[axis] - 1) as f64;
        let gx = if inside(0) {
            let d00 = v100 - v000;
            let d10 = v110 - v010;
            let d01 = v101 - v001;
            let d11 = v111 - v011;
            lerp(lerp(d00, d10, fy), lerp(d01, d11, fy), fz)
        } else {
            0.0
        };
        let gy = if inside(1) {
            lerp(c10 - c00, c11 - c01, fz)
        } else {
            0.0
        };
        let gz = if inside(2) { c1 - c0 } else { 0.0 };
        (value, [gx, gy, gz])
    }

    /// Clamped cell base index and fractional offset for a continuous
    /// position. The base is at most `dims - 2` so a full cell exists,
    /// except along singleton axes.
    #[inline]
    fn cell_of(&self, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let d = self.dims[a];
            let c = p[a].clamp(0.0, (d - 1) as f64);
            let mut b = c.floor() as usize;
            if d >= 2 && b > d - 2 {
                b = d - 2;
            }
            base[a] = b;
            frac[a] = if d >= 2 { c - b as f64 } else { 0.0 };
        }
        (base, frac)
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<u32>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            origin: [0.0; 3],
            data,
            label_names: BTreeMap::new(),
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    #[inline]
    pub fn at_clamped(&self, x: i64, y: i64, z: i64) -> u32 {
        let cx = x.clamp(0, self.dims[0] as i64 - 1) as usize;
        let cy = y.clamp(0, self.dims[1] as i64 - 1) as usize;
        let cz = z.clamp(0, self.dims[2] as i64 - 1) as usize;
        self.at(cx, cy, cz)
    }
}

// ---------------------------------------------------------------------------
// MetaImage persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ElementType {
    UChar,
    Short,
    UShort,
    Float,
}

impl ElementType {
    fn name(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::UShort => "MET_USHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_UCHAR" => Some(ElementType::UChar),
            "MET_SHORT" => Some(ElementType::Short),
            "MET_USHORT" => Some(ElementType::UShort),
            "MET_FLOAT" => Some(ElementType::Float),
            _ => None,
        }
    }

    fn byte_width(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Float => 4,
        }
    }
}

/// Decoded MetaImage: header fields plus the raw data section.
pub(crate) struct RawMha {
    pub dim_size: Vec<usize>,
    pub element_type: ElementType,
    pub spacing: Vec<f32>,
    pub offset: Vec<f32>,
    pub bytes: Vec<u8>,
}

pub(crate) fn read_raw_mha(path: &Path) -> Result<RawMha> {
    let content = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::header(path, reason);

    let mut ndims: Option<usize> = None;
    let mut dim_size: Option<Vec<usize>> = None;
    let mut element_type: Option<ElementType> = None;
    let mut spacing: Option<Vec<f32>> = None;
    let mut offset: Option<Vec<f32>> = None;
    let mut object_type_seen = false;
    let mut data_start: Option<usize> = None;

    let mut pos = 0usize;
    while pos < content.len() {
        let line_end = content[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| bad("missing ElementDataFile key".into()))?;
        let line = std::str::from_utf8(&content[pos..line_end])
            .map_err(|_| bad("non-ASCII header line".into()))?
            .trim_end_matches('\r');
        pos = line_end + 1;

        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(format!("malformed header line: {line:?}")))?;

        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(bad(format!("unsupported ObjectType {value:?}")));
                }
                object_type_seen = true;
            }
            "NDims" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| bad(format!("bad NDims value {value:?}")))?;
                if n != 3 && n != 4 {
                    return Err(bad(format!("unsupported NDims {n}")));
                }
                ndims = Some(n);
            }
            "DimSize" => {
                let dims: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad DimSize value {value:?}")))?;
                if dims.iter().any(|&d| d == 0) {
                    return Err(bad("zero extent in DimSize".into()));
                }
                dim_size = Some(dims);
            }
            "ElementType" => {
                element_type = Some(
                    ElementType::parse(value)
                        .ok_or_else(|| bad(format!("unsupported ElementType {value:?}")))?,
                );
            }
            "ElementSpacing" => {
                let sp: Vec<f32> = value
                    .split_whitespace()
                    .map(|t| t.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad ElementSpacing value {value:?}")))?;
                spacing = Some(sp);
            }
            "Offset" => {
                let of: Vec<f32> = value
                    .split_whitespace()
                    .map(|t| t.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad Offset value {value:?}")))?;
                offset = Some(of);
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(bad(format!(
                        "only ElementDataFile = LOCAL is supported, got {value:?}"
                    )));
                }
                data_start = Some(pos);
                break;
            }
            _ => return Err(bad(format!("unknown header key {key:?}"))),
        }
    }

    if !object_type_seen {
        return Err(bad("missing ObjectType".into()));
    }
    let ndims = ndims.ok_or_else(|| bad("missing NDims".into()))?;
    let dim_size = dim_size.ok_or_else(|| bad("missing DimSize".into()))?;
    let element_type = element_type.ok_or_else(|| bad("missing ElementType".into()))?;
    let spacing = spacing.ok_or_else(|| bad("missing ElementSpacing".into()))?;
    let data_start = data_start.ok_or_else(|| bad("missing ElementDataFile key".into()))?;
    if dim_size.len() != ndims {
        return Err(bad(format!(
            "DimSize has {} entries for NDims {ndims}",
            dim_size.len()
        )));
    }
    if spacing.len() != ndims {
        return Err(bad(format!(
            "ElementSpacing has {} entries for NDims {ndims}",
            spacing.len()
        )));
    }
    let offset = offset.unwrap_or_else(|| vec![0.0; ndims]);
    if offset.len() != ndims {
        return Err(bad(format!(
            "Offset has {} entries for NDims {ndims}",
            offset.len()
        )));
    }

    let expected = dim_size.iter().product::<usize>() * element_type.byte_width();
    let bytes = content[data_start..].to_vec();
    if bytes.len() != expected {
        return Err(bad(format!(
            "data section holds {} bytes, header implies {expected}",
            bytes.len()
        )));
    }

    Ok(RawMha {
        dim_size,
        element_type,
        spacing,
        offset,
        bytes,
    })
}

pub(crate) fn write_raw_mha(
    path: &Path,
    dim_size: &[usize],
    element_type: ElementType,
    spacing: &[f32],
    offset: &[f32],
    bytes: &[u8],
) -> Result<()> {
    let join = |v: &mut String, it: &mut dyn Iterator<Item = String>| {
        let parts: Vec<String> = it.collect();
        v.push_str(&parts.join(" "));
    };
    let mut header = String::new();
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = {}", dim_size.len());
    header.push_str("DimSize = ");
    join(&mut header, &mut dim_size.iter().map(|d| d.to_string()));
    header.push('\n');
    let _ = writeln!(header, "ElementType = {}", element_type.name());
    header.push_str("ElementSpacing = ");
    join(&mut header, &mut spacing.iter().map(|s| s.to_string()));
    header.push('\n');
    header.push_str("Offset = ");
    join(&mut header, &mut offset.iter().map(|o| o.to_string()));
    header.push('\n');
    let _ = writeln!(header, "ElementDataFile = LOCAL");

    let mut out = header.into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn decode_scalars(raw: &RawMha) -> Vec<f32> {
    match raw.element_type {
        ElementType::UChar => raw.bytes.iter().map(|&b| b as f32).collect(),
        ElementType::Short => raw
            .bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementType::UShort => raw
            .bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementType::Float => raw
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    }
}

fn dims3(path: &Path, raw: &RawMha) -> Result<[usize; 3]> {
    if raw.dim_size.len() != 3 {
        return Err(Error::header(
            path,
            format!("expected a 3D image, got NDims = {}", raw.dim_size.len()),
        ));
    }
    Ok([raw.dim_size[0], raw.dim_size[1], raw.dim_size[2]])
}

impl Volume {
    /// Loads a 3D MetaImage; integer element types are widened to `f32`.
    pub fn load_mha(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_raw_mha(path)?;
        let dims = dims3(path, &raw)?;
        Ok(Volume {
            dims,
            spacing: [raw.spacing[0], raw.spacing[1], raw.spacing[2]],
            origin: [raw.offset[0], raw.offset[1], raw.offset[2]],
            data: decode_scalars(&raw),
        })
    }

    /// Saves as MET_FLOAT; a save/load round trip is bit exact.
    pub fn save_mha(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_raw_mha(
            path.as_ref(),
            &self.dims,
            ElementType::Float,
            &self.spacing,
            &self.origin,
            &bytes,
        )
    }
}

impl LabelVolume {
    /// Loads a 3D MetaImage with an integer element type as a label map.
    pub fn load_mha(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_raw_mha(path)?;
        let dims = dims3(path, &raw)?;
        let data: Vec<u32> = match raw.element_type {
            ElementType::UChar => raw.bytes.iter().map(|&b| b as u32).collect(),
            ElementType::UShort => raw
                .bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect(),
            ElementType::Short => {
                let mut out = Vec::with_capacity(raw.bytes.len() / 2);
                for c in raw.bytes.chunks_exact(2) {
                    let v = i16::from_le_bytes([c[0], c[1]]);
                    if v < 0 {
                        return Err(Error::header(path, format!("negative label value {v}")));
                    }
                    out.push(v as u32);
                }
                out
            }
            ElementType::Float => {
                return Err(Error::header(
                    path,
                    "MET_FLOAT cannot be loaded as a label map",
                ))
            }
        };
        Ok(LabelVolume {
            dims,
            spacing: [raw.spacing[0], raw.spacing[1], raw.spacing[2]],
            origin: [raw.offset[0], raw.offset[1], raw.offset[2]],
            data,
            label_names: BTreeMap::new(),
        })
    }

    /// Saves with the narrowest integer element type that holds every label.
    pub fn save_mha(&self, path: impl AsRef<Path>) -> Result<()> {
        let max = self.data.iter().copied().max().unwrap_or(0);
        let (elem, bytes): (ElementType, Vec<u8>) = if max <= u8::MAX as u32 {
            (
                ElementType::UChar,
                self.data.iter().map(|&v| v as u8).collect(),
            )
        } else if max <= u16::MAX as u32 {
            (
                ElementType::UShort,
                self.data
                    .iter()
                    .flat_map(|&v| (v as u16).to_le_bytes())
                    .collect(),
            )
        } else {
            return Err(Error::invalid(format!(
                "label {max} exceeds the 16-bit MetaImage range"
            )));
        };
        write_raw_mha(
            path.as_ref(),
            &self.dims,
            elem,
            &self.spacing,
            &self.origin,
            &bytes,
        )
    }
}

// ---------------------------------------------------------------------------
// Filtering and resampling
// ---------------------------------------------------------------------------

/// Normalized Gaussian taps at integer offsets `-radius..=radius`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Convolves one axis with the given taps, clamp-to-edge. Writes are
/// per-voxel disjoint, so the result is independent of the thread count.
pub(crate) fn filter_axis(dims: [usize; 3], data: &[f32], axis: usize, taps: &[f64]) -> Vec<f32> {
    let radius = taps.len() / 2;
    let n = voxel_count(dims);
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let extent = dims[axis];
    let mut out = vec![0f32; n];
    out.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        let coord = match axis {
            0 => idx % dims[0],
            1 => (idx / dims[0]) % dims[1],
            _ => idx / (dims[0] * dims[1]),
        };
        let line_base = idx - coord * stride;
        let mut acc = 0f64;
        for (k, &w) in taps.iter().enumerate() {
            let o = coord as i64 + k as i64 - radius as i64;
            let c = o.clamp(0, extent as i64 - 1) as usize;
            acc += w * data[line_base + c * stride] as f64;
        }
        *slot = acc as f32;
    });
    out
}

/// Separable 3D smoothing with the same taps on every axis.
pub(crate) fn smooth_separable(dims: [usize; 3], data: &[f32], taps: &[f64]) -> Vec<f32> {
    let a = filter_axis(dims, data, 0, taps);
    let b = filter_axis(dims, &a, 1, taps);
    filter_axis(dims, &b, 2, taps)
}

/// Resamples onto an isotropic grid with target spacing `t` mm. Output
/// extent per axis is `round(dims * spacing / t)`, at least 1.
pub fn resample_isotropic(v: &Volume, t: f32, interp: Interp) -> Result<Volume> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("target spacing must be > 0, got {t}")));
    }
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = ((v.dims[a] as f64 * v.spacing[a] as f64 / t as f64).round() as usize).max(1);
    }
    let scale = [
        t as f64 / v.spacing[0] as f64,
        t as f64 / v.spacing[1] as f64,
        t as f64 / v.spacing[2] as f64,
    ];
    let mut out = Volume::zeros(out_dims, [t, t, t]);
    out.origin = v.origin;
    let dims = out_dims;
    out.data
        .par_iter_mut()
        .enumerate()
        .for_each(|(idx, slot)| {
            let x = idx % dims[0];
            let y = (idx / dims[0]) % dims[1];
            let z = idx / (dims[0] * dims[1]);
            let p = [
                x as f64 * scale[0],
                y as f64 * scale[1],
                z as f64 * scale[2],
            ];
            *slot = v.sample(p, interp);
        });
    Ok(out)
}

/// Affinely maps intensities so min -> lo and max -> hi. A constant volume
/// maps to all `lo`.
pub fn rescale_intensity(v: &Volume, lo: f32, hi: f32) -> Volume {
    let (min, max) = v.min_max();
    let mut out = v.clone();
    if min == max {
        out.data.iter_mut().for_each(|x| *x = lo);
        return out;
    }
    let scale = (hi as f64 - lo as f64) / (max as f64 - min as f64);
    out.data
        .iter_mut()
        .for_each(|x| *x = (lo as f64 + (*x as f64 - min as f64) * scale) as f32);
    out
}

/// Gaussian pyramid, finest first: `result[0]` is the input; each coarser
/// level smooths (sigma = 1 voxel, 5 taps) then keeps every second voxel,
/// doubling the stored spacing.
pub fn gaussian_pyramid(v: &Volume, levels: usize) -> Result<Vec<Volume>> {
    if levels < 1 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    if levels > 1 {
        for a in 0..3 {
            let coarsest = (v.dims[a] + (1 << (levels - 1)) - 1) >> (levels - 1);
            if coarsest < 4 {
                return Err(Error::invalid(format!(
                    "{} levels would shrink axis {a} to {coarsest} voxels (minimum 4)",
                    levels
                )));
            }
        }
    }
    let taps = gaussian_kernel(1.0, 2);
    let mut out = Vec::with_capacity(levels);
    out.push(v.clone());
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let smoothed = smooth_separable(prev.dims, &prev.data, &taps);
        let dims = [
            prev.dims[0].div_ceil(2),
            prev.dims[1].div_ceil(2),
            prev.dims[2].div_ceil(2),
        ];
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in (0..prev.dims[2]).step_by(2) {
            for y in (0..prev.dims[1]).step_by(2) {
                for x in (0..prev.dims[0]).step_by(2) {
                    data.push(smoothed[linear_index(prev.dims, x, y, z)]);
                }
            }
        }
        let mut level = Volume::new(dims, prev.spacing.map(|s| s * 2.0), data)?;
        level.origin = prev.origin;
        out.push(level);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: [usize; 3]) -> Volume {
        let n = voxel_count(dims);
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let x = i % dims[0];
                let y = (i / dims[0]) % dims[1];
                let z = i / (dims[0] * dims[1]);
                (x as f32) + 0.5 * (y as f32) + 0.25 * (z as f32)
            })
            .collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn uchar_bytes_decode_x_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.mha");
        let header = "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\nElementSpacing = 1 1 1\nElementDataFile = LOCAL\n";
        let mut bytes = header.as_bytes().to_vec();
        bytes.extend(0u8..8);
        std::fs::write(&path, bytes).unwrap();
        let v = Volume::load_mha(&path).unwrap();
        assert_eq!(v.dims, [2, 2, 2]);
        assert_eq!(v.data, (0..8).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(v.origin, [0.0; 3]);
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.mha");
        let mut v = ramp_volume([3, 4, 5]);
        v.spacing = [1.25, 6.0, 1.25];
        v.origin = [-3.5, 0.0, 2.0];
        v.data[7] = -0.123456789;
        v.save_mha(&path).unwrap();
        let back = Volume::load_mha(&path).unwrap();
        assert_eq!(v.dims, back.dims);
        assert_eq!(v.spacing, back.spacing);
        assert_eq!(v.origin, back.origin);
        assert_eq!(v.data, back.data);
    }

    #[test]
    fn label_round_trip_preserves_integers() {
        let dir = tempfile::tempdir().unwrap();
        for max in [200u32, 40_000u32] {
            let path = dir.path().join(format!("labels_{max}.mha"));
            let mut l = LabelVolume::new([4, 3, 2], [2.0; 3], vec![0; 24]).unwrap();
            l.data[5] = max;
            l.data[10] = 3;
            l.save_mha(&path).unwrap();
            let back = LabelVolume::load_mha(&path).unwrap();
            assert_eq!(l.data, back.data);
            assert_eq!(l.spacing, back.spacing);
        }
    }

    #[test]
    fn truncated_data_is_a_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.mha");
        let header = "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\nElementSpacing = 1 1 1\nElementDataFile = LOCAL\n";
        let mut bytes = header.as_bytes().to_vec();
        bytes.extend(0u8..5);
        std::fs::write(&path, bytes).unwrap();
        match Volume::load_mha(&path) {
            Err(Error::Header { .. }) => {}
            other => panic!("expected header error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_element_type_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weird.mha");
        let header = "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\nElementType = MET_DOUBLE\nElementSpacing = 1 1 1\nElementDataFile = LOCAL\n";
        let mut bytes = header.as_bytes().to_vec();
        bytes.extend([0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            Volume::load_mha(&path),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn trilinear_matches_grid_at_integer_positions() {
        let v = ramp_volume([4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let s = v.sample_trilinear([x as f64, y as f64, z as f64]);
                    assert_eq!(s, v.at(x, y, z));
                }
            }
        }
        // Linear ramp is reproduced exactly between nodes.
        let s = v.sample_trilinear([1.5, 2.25, 0.75]);
        assert!((s - (1.5 + 0.5 * 2.25 + 0.25 * 0.75)).abs() < 1e-6);
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let dims = [8, 8, 8];
        let n = voxel_count(dims);
        let data: Vec<f32> = (0..n)
            .map(|i| ((i as f32) * 0.37).sin() + 0.002 * i as f32)
            .collect();
        let v = Volume::new(dims, [1.0; 3], data).unwrap();
        // Trilinear values are piecewise linear, so a step that stays inside
        // the cell is exact; a large step also avoids f32 rounding noise.
        let h = 0.05;
        for p in [[2.3, 4.7, 1.2], [5.5, 2.1, 6.6], [3.9, 3.2, 3.8]] {
            let (_, g) = v.sample_with_gradient(p);
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                let fd = (v.sample_trilinear(hi) as f64 - v.sample_trilinear(lo) as f64) / (2.0 * h);
                assert!((g[a] - fd).abs() < 1e-3, "axis {a}: {} vs {}", g[a], fd);
            }
        }
    }

    #[test]
    fn resample_doubles_extent_when_halving_spacing() {
        let mut v = ramp_volume([32, 32, 32]);
        v.spacing = [2.0; 3];
        let out = resample_isotropic(&v, 1.0, Interp::Trilinear).unwrap();
        assert_eq!(out.dims, [64, 64, 64]);
        assert_eq!(out.spacing, [1.0; 3]);
    }

    #[test]
    fn resample_identity_when_spacing_matches() {
        let mut v = ramp_volume([10, 12, 9]);
        v.spacing = [1.25; 3];
        let out = resample_isotropic(&v, 1.25, Interp::Trilinear).unwrap();
        assert_eq!(out.dims, v.dims);
        let max_diff = v
            .data
            .iter()
            .zip(&out.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_diff < 1e-6);
    }

    #[test]
    fn rescale_maps_midpoint_and_constants() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![10.0, 20.0]).unwrap();
        let out = rescale_intensity(&v, 0.0, 255.0);
        assert_eq!(out.data, vec![0.0, 255.0]);
        let mid = Volume::new([3, 1, 1], [1.0; 3], vec![10.0, 15.0, 20.0]).unwrap();
        assert!((rescale_intensity(&mid, 0.0, 255.0).data[1] - 127.5).abs() < 1e-6);
        let flat = Volume::new([2, 1, 1], [1.0; 3], vec![7.0, 7.0]).unwrap();
        assert_eq!(rescale_intensity(&flat, 3.0, 9.0).data, vec![3.0, 3.0]);
    }

    #[test]
    fn pyramid_dims_and_spacing() {
        let v = ramp_volume([64, 64, 64]);
        let pyr = gaussian_pyramid(&v, 3).unwrap();
        assert_eq!(pyr.len(), 3);
        assert_eq!(pyr[0].dims, [64, 64, 64]);
        assert_eq!(pyr[1].dims, [32, 32, 32]);
        assert_eq!(pyr[2].dims, [16, 16, 16]);
        assert_eq!(pyr[2].spacing, [4.0; 3]);
        assert_eq!(pyr[0].data, v.data);
    }

    #[test]
    fn pyramid_preserves_constant_volumes() {
        let v = Volume::new([16, 16, 16], [1.0; 3], vec![5.0; 4096]).unwrap();
        let pyr = gaussian_pyramid(&v, 3).unwrap();
        for level in &pyr {
            for &x in &level.data {
                assert!((x - 5.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pyramid_rejects_overly_deep_requests() {
        let v = ramp_volume([16, 16, 16]);
        assert!(gaussian_pyramid(&v, 3).is_ok());
        assert!(gaussian_pyramid(&v, 4).is_err());
        assert!(gaussian_pyramid(&v, 0).is_err());
    }

    #[test]
    fn odd_extent_pyramid_rounds_up() {
        let v = ramp_volume([9, 10, 11]);
        let pyr = gaussian_pyramid(&v, 2).unwrap();
        assert_eq!(pyr[1].dims, [5, 5, 6]);
    }
}
