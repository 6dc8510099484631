//! Modality-independent neighbourhood descriptors.
//!
//! For each voxel the descriptor holds one channel per offset in a search
//! neighbourhood; channel `i` is `exp(-d_p(x, r_i) / v(x))`, normalized so
//! the largest channel is exactly 1, where `d_p` is a Gaussian-weighted
//! squared patch difference and `v` the mean patch distance over the six
//! axis neighbours. The construction depends only on local intensity
//! *relations*, so descriptors agree across affine intensity remaps, which
//! is what makes them usable across modalities.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::util::deterministic_sum;
use crate::volume::{linear_index, voxel_count, Volume};

/// Relative clamp bounds for the variance estimate, versus its volume mean.
const VARIANCE_CLAMP_LO: f64 = 1e-6;
const VARIANCE_CLAMP_HI: f64 = 1e6;

/// The six axis-aligned unit offsets.
pub fn six_neighborhood() -> Vec<[i32; 3]> {
    vec![
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ]
}

/// Descriptor construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MindParams {
    /// Gaussian patch weighting σ in voxels.
    pub sigma: f64,
    /// Search offsets r_i; one descriptor channel each.
    pub neighborhood: Vec<[i32; 3]>,
    /// Patch half-size, always `ceil(1.5 * sigma)`.
    pub patch_half_size: usize,
}

impl MindParams {
    pub fn new(sigma: f64, neighborhood: Vec<[i32; 3]>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if neighborhood.is_empty() {
            return Err(Error::invalid("neighborhood must be non-empty"));
        }
        if neighborhood.contains(&[0, 0, 0]) {
            return Err(Error::invalid("neighborhood must exclude the zero offset"));
        }
        Ok(MindParams {
            sigma,
            neighborhood,
            patch_half_size: (1.5 * sigma).ceil() as usize,
        })
    }
}

impl Default for MindParams {
    /// σ = 0.5 (3³ patches) over the six-neighbourhood.
    fn default() -> Self {
        MindParams::new(0.5, six_neighborhood()).unwrap()
    }
}

/// Dense descriptor field; `channels` values per voxel, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MindField {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl MindField {
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[c + self.channels * linear_index(self.dims, x, y, z)]
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Debug dump as a 4D MetaImage, channels fastest.
    pub fn save_mha(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::volume::write_raw_mha(
            path.as_ref(),
            &[self.channels, self.dims[0], self.dims[1], self.dims[2]],
            crate::volume::ElementType::Float,
            &[1.0, self.spacing[0], self.spacing[1], self.spacing[2]],
            &[0.0; 4],
            &bytes,
        )
    }
}

#[inline]
fn clamp_voxel(dims: [usize; 3], x: i64, y: i64, z: i64) -> usize {
    let cx = x.clamp(0, dims[0] as i64 - 1) as usize;
    let cy = y.clamp(0, dims[1] as i64 - 1) as usize;
    let cz = z.clamp(0, dims[2] as i64 - 1) as usize;
    linear_index(dims, cx, cy, cz)
}

/// Normalized 1D Gaussian taps over `-h..=h`.
fn patch_kernel(sigma: f64, h: usize) -> Vec<f64> {
    crate::volume::gaussian_kernel(sigma, h)
}

/// Gaussian-weighted squared difference between the patch at `x` and the
/// patch displaced by `r`. Patch positions are clamped to the volume, and
/// each clamped position's `r`-neighbour is clamped again, matching the
/// dense descriptor computation exactly.
pub fn patch_distance(v: &Volume, x: [usize; 3], r: [i32; 3], params: &MindParams) -> f64 {
    let h = params.patch_half_size as i64;
    let k = patch_kernel(params.sigma, params.patch_half_size);
    let dims = v.dims;
    let mut acc = 0f64;
    for dz in -h..=h {
        let wz = k[(dz + h) as usize];
        for dy in -h..=h {
            let wyz = wz * k[(dy + h) as usize];
            for dx in -h..=h {
                let w = wyz * k[(dx + h) as usize];
                let p = clamp_voxel(
                    dims,
                    x[0] as i64 + dx,
                    x[1] as i64 + dy,
                    x[2] as i64 + dz,
                );
                let px = p % dims[0];
                let py = (p / dims[0]) % dims[1];
                let pz = p / (dims[0] * dims[1]);
                let q = clamp_voxel(
                    dims,
                    px as i64 + r[0] as i64,
                    py as i64 + r[1] as i64,
                    pz as i64 + r[2] as i64,
                );
                let d = v.data[p] as f64 - v.data[q] as f64;
                acc += w * d * d;
            }
        }
    }
    acc
}

/// Separable clamp-to-edge convolution along one axis, in f64.
fn filter_axis_f64(dims: [usize; 3], data: &[f64], axis: usize, taps: &[f64]) -> Vec<f64> {
    let radius = taps.len() / 2;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let extent = dims[axis];
    let mut out = vec![0f64; data.len()];
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
            acc += w * data[line_base + c * stride];
        }
        *slot = acc;
    });
    out
}

/// All patch distances for one offset, via a squared-difference image and a
/// separable Gaussian. Identical to calling [`patch_distance`] per voxel.
fn patch_distance_field(v: &Volume, r: [i32; 3], taps: &[f64]) -> Vec<f64> {
    let dims = v.dims;
    let n = voxel_count(dims);
    let mut sq = vec![0f64; n];
    sq.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        let x = idx % dims[0];
        let y = (idx / dims[0]) % dims[1];
        let z = idx / (dims[0] * dims[1]);
        let q = clamp_voxel(
            dims,
            x as i64 + r[0] as i64,
            y as i64 + r[1] as i64,
            z as i64 + r[2] as i64,
        );
        let d = v.data[idx] as f64 - v.data[q] as f64;
        *slot = d * d;
    });
    let a = filter_axis_f64(dims, &sq, 0, taps);
    let b = filter_axis_f64(dims, &a, 1, taps);
    filter_axis_f64(dims, &b, 2, taps)
}

/// Computes the dense descriptor field.
pub fn compute_mind(v: &Volume, params: &MindParams) -> Result<MindField> {
    let h = params.patch_half_size;
    for a in 0..3 {
        if v.dims[a] < 2 * h + 1 {
            return Err(Error::invalid(format!(
                "volume axis {a} has {} voxels, need at least {} for the patch size",
                v.dims[a],
                2 * h + 1
            )));
        }
    }
    let taps = patch_kernel(params.sigma, h);
    let n = voxel_count(v.dims);
    let six = six_neighborhood();

    // Patch distances for every offset needed: descriptor channels plus the
    // six axis offsets that define the variance estimate.
    let mut offsets: Vec<[i32; 3]> = six.clone();
    for &r in &params.neighborhood {
        if !offsets.contains(&r) {
            offsets.push(r);
        }
    }
    let dp: Vec<Vec<f64>> = offsets
        .iter()
        .map(|&r| patch_distance_field(v, r, &taps))
        .collect();
    let channel_of: Vec<usize> = params
        .neighborhood
        .iter()
        .map(|r| offsets.iter().position(|o| o == r).unwrap())
        .collect();

    // v(x): mean of the six axis patch distances, then clamped relative to
    // its volume-wide mean so flat regions cannot divide by zero.
    let variance: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (0..6).map(|k| dp[k][i]).sum::<f64>() / 6.0)
        .collect();
    let mean_v = deterministic_sum(n, |i| variance[i]) / n as f64;
    let (clamp_lo, clamp_hi) = (VARIANCE_CLAMP_LO * mean_v, VARIANCE_CLAMP_HI * mean_v);

    let channels = params.neighborhood.len();
    let mut data = vec![0f32; n * channels];
    data.par_chunks_mut(channels)
        .enumerate()
        .for_each(|(i, out)| {
            let var = variance[i].clamp(clamp_lo, clamp_hi);
            let dp_min = channel_of
                .iter()
                .map(|&k| dp[k][i])
                .fold(f64::INFINITY, f64::min);
            for (c, &k) in channel_of.iter().enumerate() {
                let excess = dp[k][i] - dp_min;
                // Normalized via the channel minimum: the smallest distance
                // maps to exp(0) = 1, so the per-voxel maximum is exact.
                out[c] = if excess == 0.0 {
                    1.0
                } else {
                    (-excess / var).exp() as f32
                };
            }
        });

    Ok(MindField {
        dims: v.dims,
        spacing: v.spacing,
        channels,
        data,
    })
}

fn check_compatible(a: &MindField, b: &MindField) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch {
            context: "descriptor fields",
            left: a.dims,
            right: b.dims,
        });
    }
    if a.channels != b.channels {
        return Err(Error::invalid(format!(
            "descriptor channel mismatch: {} vs {}",
            a.channels, b.channels
        )));
    }
    Ok(())
}

/// Mean absolute channel difference at one voxel; in [0, 1].
pub fn mind_pointwise_dissimilarity(a: &MindField, b: &MindField, x: [usize; 3]) -> Result<f64> {
    check_compatible(a, b)?;
    let idx = linear_index(a.dims, x[0], x[1], x[2]);
    Ok(pointwise(a, b, idx))
}

#[inline]
pub(crate) fn pointwise(a: &MindField, b: &MindField, idx: usize) -> f64 {
    let va = a.voxel(idx);
    let vb = b.voxel(idx);
    let sum: f64 = va
        .iter()
        .zip(vb)
        .map(|(&p, &q)| (p as f64 - q as f64).abs())
        .sum();
    sum / a.channels as f64
}

/// Sum over voxels of the squared pointwise dissimilarity. Zero iff the
/// fields are identical; symmetric in its arguments.
pub fn mind_total(a: &MindField, b: &MindField) -> Result<f64> {
    check_compatible(a, b)?;
    let n = voxel_count(a.dims);
    Ok(deterministic_sum(n, |i| {
        let e = pointwise(a, b, i);
        e * e
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(dims: [usize; 3], seed: u64) -> Volume {
        let n = voxel_count(dims);
        let data: Vec<f32> = (0..n)
            .map(|i| crate::util::hash_unit(seed, i as u64) as f32 * 100.0)
            .collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    /// Independent brute-force patch distance: explicit Gaussian weights,
    /// compose-clamped sampling, no shared code with the implementation.
    fn oracle_patch_distance(v: &Volume, x: [i64; 3], r: [i32; 3], sigma: f64, h: i64) -> f64 {
        let g = |d: i64| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        let mut wsum = 0.0;
        for dz in -h..=h {
            for dy in -h..=h {
                for dx in -h..=h {
                    wsum += g(dx) * g(dy) * g(dz);
                }
            }
        }
        let clamp = |p: [i64; 3]| {
            [
                p[0].clamp(0, v.dims[0] as i64 - 1),
                p[1].clamp(0, v.dims[1] as i64 - 1),
                p[2].clamp(0, v.dims[2] as i64 - 1),
            ]
        };
        let read = |p: [i64; 3]| v.at(p[0] as usize, p[1] as usize, p[2] as usize) as f64;
        let mut acc = 0.0;
        for dz in -h..=h {
            for dy in -h..=h {
                for dx in -h..=h {
                    let w = g(dx) * g(dy) * g(dz) / wsum;
                    let p = clamp([x[0] + dx, x[1] + dy, x[2] + dz]);
                    let q = clamp([p[0] + r[0] as i64, p[1] + r[1] as i64, p[2] + r[2] as i64]);
                    let d = read(p) - read(q);
                    acc += w * d * d;
                }
            }
        }
        acc
    }

    #[test]
    fn patch_distance_on_constant_volume_is_zero() {
        let v = Volume::new([5, 5, 5], [1.0; 3], vec![3.0; 125]).unwrap();
        let params = MindParams::default();
        assert_eq!(patch_distance(&v, [2, 2, 2], [1, 0, 0], &params), 0.0);
        assert_eq!(patch_distance(&v, [0, 0, 0], [0, -1, 0], &params), 0.0);
    }

    #[test]
    fn patch_distance_scales_quadratically() {
        let v = textured([7, 7, 7], 11);
        let mut scaled = v.clone();
        for x in &mut scaled.data {
            *x *= 2.0;
        }
        let params = MindParams::default();
        for x in [[3, 3, 3], [0, 6, 2], [5, 1, 4]] {
            let base = patch_distance(&v, x, [0, 1, 0], &params);
            let quad = patch_distance(&scaled, x, [0, 1, 0], &params);
            assert_eq!(quad, 4.0 * base);
        }
    }

    #[test]
    fn patch_distance_impulse_matches_oracle() {
        let mut v = Volume::zeros([5, 5, 5], [1.0; 3]);
        let c = v.index(2, 2, 2);
        v.data[c] = 1.0;
        let params = MindParams::default();
        let got = patch_distance(&v, [2, 2, 2], [1, 0, 0], &params);
        let want = oracle_patch_distance(&v, [2, 2, 2], [1, 0, 0], 0.5, 1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // Frozen: w(0,0,0) + w(-1,0,0) for the normalized 3-tap kernel.
        let e2 = (-2.0f64).exp();
        let g0 = 1.0 / (1.0 + 2.0 * e2);
        let g1 = e2 / (1.0 + 2.0 * e2);
        let frozen = g0 * g0 * (g0 + g1);
        assert!((got - frozen).abs() < 1e-12, "{got} vs {frozen}");
    }

    #[test]
    fn patch_distance_matches_oracle_at_edges() {
        let v = textured([6, 5, 7], 29);
        let params = MindParams::default();
        for x in [[0, 0, 0], [5, 4, 6], [0, 4, 3], [5, 0, 0]] {
            for r in six_neighborhood() {
                let got = patch_distance(&v, x, r, &params);
                let want =
                    oracle_patch_distance(&v, [x[0] as i64, x[1] as i64, x[2] as i64], r, 0.5, 1);
                let rel = (got - want).abs() / want.abs().max(1.0);
                assert!(rel < 1e-12, "at {x:?} offset {r:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn compute_mind_constant_volume_is_all_ones() {
        let v = Volume::new([5, 5, 5], [1.0; 3], vec![7.5; 125]).unwrap();
        let f = compute_mind(&v, &MindParams::default()).unwrap();
        assert!(f.data.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn compute_mind_per_voxel_max_is_exactly_one() {
        let v = textured([9, 8, 7], 5);
        let f = compute_mind(&v, &MindParams::default()).unwrap();
        for i in 0..voxel_count(v.dims) {
            let vox = f.voxel(i);
            let max = vox.iter().copied().fold(f32::MIN, f32::max);
            assert_eq!(max, 1.0, "voxel {i}");
            assert!(vox.iter().all(|&s| s > 0.0 && s <= 1.0));
        }
    }

    #[test]
    fn compute_mind_matches_per_voxel_definition() {
        let v = textured([8, 7, 6], 17);
        let params = MindParams::default();
        let f = compute_mind(&v, &params).unwrap();
        let n = voxel_count(v.dims);
        // Reference: per-voxel patch distances -> mean variance -> clamp ->
        // exp, assembled without the separable fast path.
        let six = six_neighborhood();
        let dp: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let x = [
                    i % v.dims[0],
                    (i / v.dims[0]) % v.dims[1],
                    i / (v.dims[0] * v.dims[1]),
                ];
                six.iter().map(|&r| patch_distance(&v, x, r, &params)).collect()
            })
            .collect();
        let var: Vec<f64> = dp.iter().map(|d| d.iter().sum::<f64>() / 6.0).collect();
        let mean_v: f64 = var.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            let vc = var[i].clamp(1e-6 * mean_v, 1e6 * mean_v);
            let s: Vec<f64> = dp[i].iter().map(|&d| (-d / vc).exp()).collect();
            let max = s.iter().copied().fold(f64::MIN, f64::max);
            for c in 0..6 {
                let want = s[c] / max;
                let got = f.voxel(i)[c] as f64;
                assert!(
                    (got - want).abs() < 1e-6,
                    "voxel {i} channel {c}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn compute_mind_is_affine_intensity_invariant() {
        let v = textured([10, 9, 8], 23);
        let f = compute_mind(&v, &MindParams::default()).unwrap();
        for (a, b) in [(2.0f32, 10.0f32), (0.5, -3.0)] {
            let mut remapped = v.clone();
            for x in &mut remapped.data {
                *x = a * *x + b;
            }
            let g = compute_mind(&remapped, &MindParams::default()).unwrap();
            let max_diff = f
                .data
                .iter()
                .zip(&g.data)
                .map(|(p, q)| (p - q).abs())
                .fold(0f32, f32::max);
            assert!(max_diff < 1e-5, "(a,b)=({a},{b}): {max_diff}");
        }
    }

    #[test]
    fn pointwise_dissimilarity_formula_cases() {
        let dims = [3, 3, 3];
        let n = voxel_count(dims);
        let a = MindField {
            dims,
            spacing: [1.0; 3],
            channels: 6,
            data: vec![1.0; n * 6],
        };
        let mut b = a.clone();
        assert_eq!(mind_pointwise_dissimilarity(&a, &b, [1, 1, 1]).unwrap(), 0.0);
        // One channel dropped to 0 at one voxel -> 1/6 there.
        let idx = linear_index(dims, 1, 1, 1);
        b.data[idx * 6 + 2] = 0.0;
        let d = mind_pointwise_dissimilarity(&a, &b, [1, 1, 1]).unwrap();
        assert!((d - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(mind_total(&a, &a).unwrap(), 0.0);
        let total = mind_total(&a, &b).unwrap();
        assert!((total - 1.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn mind_total_matches_brute_force_and_is_symmetric() {
        let va = textured([6, 6, 6], 3);
        let vb = textured([6, 6, 6], 4);
        let params = MindParams::default();
        let a = compute_mind(&va, &params).unwrap();
        let b = compute_mind(&vb, &params).unwrap();
        let mut brute = 0f64;
        for i in 0..voxel_count(va.dims) {
            let mut e = 0f64;
            for c in 0..6 {
                e += (a.voxel(i)[c] as f64 - b.voxel(i)[c] as f64).abs();
            }
            e /= 6.0;
            brute += e * e;
        }
        let total = mind_total(&a, &b).unwrap();
        assert!((total - brute).abs() / brute < 1e-6);
        assert_eq!(total, mind_total(&b, &a).unwrap());
    }

    #[test]
    fn params_validate_inputs() {
        assert!(MindParams::new(0.0, six_neighborhood()).is_err());
        assert!(MindParams::new(1.0, vec![]).is_err());
        assert!(MindParams::new(1.0, vec![[0, 0, 0]]).is_err());
        let p = MindParams::new(1.0, six_neighborhood()).unwrap();
        assert_eq!(p.patch_half_size, 2);
        assert_eq!(MindParams::default().patch_half_size, 1);
    }

    #[test]
    fn descriptor_field_serializes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mind.mha");
        let v = textured([5, 5, 5], 9);
        let f = compute_mind(&v, &MindParams::default()).unwrap();
        f.save_mha(&path).unwrap();
        assert!(path.exists());
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"ObjectType = Image\nNDims = 4\nDimSize = 6 5 5 5\n"));
    }
}
