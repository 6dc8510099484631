//! Dissimilarity measures and their gradients with respect to dense
//! per-voxel displacements.
//!
//! All measures are minimized: NMI is −(H_A + H_B)/H_AB (so −2 is a perfect
//! match), the descriptor measure sums squared pointwise descriptor
//! differences, and local NCC is 1 minus the mean squared windowed
//! correlation. The combined measure is `β·E_NMI + (1−β)·s·E_MIND` with the
//! scale `s` chosen by one of three strategies.
//!
//! Gradients are returned as [`DenseField`]s over the fixed image's voxels,
//! in voxel units, and every reduction uses a fixed summation order so
//! results are bit-identical across thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mind::{self, MindField, MindParams};
use crate::transform::{warp, ControlGrid, DenseField};
use crate::util::{deterministic_sum, percentile};
use crate::volume::{voxel_count, Interp, Volume};

/// Histogram resolution; the intensity range spans this many equal bins.
pub const DEFAULT_BINS: usize = 100;
/// Intensity range percentiles used for histogram binning.
pub const RANGE_PERCENTILES: (f64, f64) = (0.5, 99.5);
/// Local NCC window radius in voxels.
pub const DEFAULT_LNCC_RADIUS: usize = 3;
/// Windows with less local variance than this contribute zero correlation.
const LNCC_VARIANCE_FLOOR: f64 = 1e-8;
/// Scale-strategy denominators below this are degenerate.
const SCALE_DENOM_FLOOR: f64 = 1e-12;

/// Intensity range between the 0.5 and 99.5 percentiles.
pub fn percentile_range(v: &Volume) -> (f32, f32) {
    let mut sorted = v.data.clone();
    sorted.sort_unstable_by(f32::total_cmp);
    (
        percentile(&sorted, RANGE_PERCENTILES.0),
        percentile(&sorted, RANGE_PERCENTILES.1),
    )
}

/// Splits an intensity into adjacent histogram bins. Returns the lower bin
/// and the fractional weight of the upper bin; out-of-range values clamp to
/// the end bins.
#[inline]
fn bin_split(value: f32, range: (f32, f32), bins: usize) -> (usize, f64) {
    let (lo, hi) = (range.0 as f64, range.1 as f64);
    if !(hi > lo) {
        return (0, 0.0);
    }
    let c = ((value as f64 - lo) / (hi - lo) * (bins - 1) as f64).clamp(0.0, (bins - 1) as f64);
    let i = (c.floor() as usize).min(bins - 2);
    (i, c - i as f64)
}

/// Joint intensity histogram with partial-volume accumulation.
///
/// Each sample splits into the two adjacent bins per axis by linear
/// fraction. The 2x2 joint mass uses the largest coupling consistent with
/// those per-axis fractions (mass `min` on the matching corners, remainder
/// on one off corner), which preserves the linear-fraction marginals and
/// keeps identical images exactly on the diagonal.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    pub bins: usize,
    pub range_f: (f32, f32),
    pub range_m: (f32, f32),
    /// Normalized bins x bins table, fixed-image bin slowest.
    pub joint: Vec<f64>,
}

/// Per-sample 2x2 joint weights for fixed fraction `fa` and moving
/// fraction `fb`; indices are (row offset, column offset, mass).
#[inline]
fn coupling_weights(fa: f64, fb: f64) -> [(usize, usize, f64); 4] {
    let m00 = (1.0 - fa).min(1.0 - fb);
    let m11 = fa.min(fb);
    if fa >= fb {
        [(0, 0, m00), (1, 1, m11), (1, 0, fa - fb), (0, 1, 0.0)]
    } else {
        [(0, 0, m00), (1, 1, m11), (1, 0, 0.0), (0, 1, fb - fa)]
    }
}

impl JointHistogram {
    /// Builds with ranges taken from the two inputs' percentiles.
    pub fn build(fixed: &Volume, warped_moving: &Volume) -> Result<Self> {
        let range_f = percentile_range(fixed);
        let range_m = percentile_range(warped_moving);
        Self::build_with_ranges(
            fixed,
            &warped_moving.data,
            DEFAULT_BINS,
            range_f,
            range_m,
        )
    }

    pub(crate) fn build_with_ranges(
        fixed: &Volume,
        moving_values: &[f32],
        bins: usize,
        range_f: (f32, f32),
        range_m: (f32, f32),
    ) -> Result<Self> {
        if fixed.data.len() != moving_values.len() {
            return Err(Error::invalid(format!(
                "joint histogram inputs differ in length: {} vs {}",
                fixed.data.len(),
                moving_values.len()
            )));
        }
        if bins < 2 {
            return Err(Error::invalid("histogram needs at least 2 bins"));
        }
        let mut joint = vec![0f64; bins * bins];
        for (&a, &b) in fixed.data.iter().zip(moving_values) {
            let (ia, fa) = bin_split(a, range_f, bins);
            let (jb, fb) = bin_split(b, range_m, bins);
            for (r, c, w) in coupling_weights(fa, fb) {
                if w > 0.0 {
                    joint[(ia + r) * bins + (jb + c)] += w;
                }
            }
        }
        let total = fixed.data.len() as f64;
        for p in &mut joint {
            *p /= total;
        }
        Ok(JointHistogram {
            bins,
            range_f,
            range_m,
            joint,
        })
    }

    pub fn marginal_fixed(&self) -> Vec<f64> {
        let mut m = vec![0f64; self.bins];
        for i in 0..self.bins {
            for j in 0..self.bins {
                m[i] += self.joint[i * self.bins + j];
            }
        }
        m
    }

    pub fn marginal_moving(&self) -> Vec<f64> {
        let mut m = vec![0f64; self.bins];
        for i in 0..self.bins {
            for j in 0..self.bins {
                m[j] += self.joint[i * self.bins + j];
            }
        }
        m
    }
}

/// Shannon entropy in nats of a normalized table; zero entries contribute 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

fn nmi_from_histogram(h: &JointHistogram) -> Result<f64> {
    let h_a = entropy(&h.marginal_fixed());
    let h_b = entropy(&h.marginal_moving());
    let h_ab = entropy(&h.joint);
    if h_ab <= 0.0 {
        return Err(Error::DegeneratePair);
    }
    Ok(-(h_a + h_b) / h_ab)
}

/// Normalized mutual information dissimilarity −(H_A+H_B)/H_AB; in
/// [−2, −1], lower is more similar.
pub fn nmi_dissimilarity(fixed: &Volume, warped_moving: &Volume) -> Result<f64> {
    if fixed.dims != warped_moving.dims {
        return Err(Error::DimensionMismatch {
            context: "nmi inputs",
            left: fixed.dims,
            right: warped_moving.dims,
        });
    }
    nmi_from_histogram(&JointHistogram::build(fixed, warped_moving)?)
}

/// NMI evaluation context with frozen intensity ranges.
///
/// Ranges are resolved from the fixed image and the moving image at its
/// initial alignment, then held constant so the objective stays smooth
/// while the displacement evolves.
#[derive(Debug, Clone)]
pub struct NmiContext {
    pub bins: usize,
    pub range_f: (f32, f32),
    pub range_m: (f32, f32),
}

impl NmiContext {
    pub fn new(fixed: &Volume, moving_at_init: &Volume, bins: usize) -> Self {
        NmiContext {
            bins,
            range_f: percentile_range(fixed),
            range_m: percentile_range(moving_at_init),
        }
    }

    /// Warped moving values and their spatial intensity gradients at every
    /// fixed voxel.
    fn warp_with_gradients(
        &self,
        moving: &Volume,
        field: &DenseField,
    ) -> (Vec<f32>, Vec<[f64; 3]>) {
        let dims = field.dims;
        let n = voxel_count(dims);
        let mut values = vec![0f32; n];
        let mut grads = vec![[0f64; 3]; n];
        values
            .par_iter_mut()
            .zip(grads.par_iter_mut())
            .enumerate()
            .for_each(|(idx, (val, grad))| {
                let x = idx % dims[0];
                let y = (idx / dims[0]) % dims[1];
                let z = idx / (dims[0] * dims[1]);
                let d = field.data[idx];
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let (v, g) = moving.sample_with_gradient(p);
                *val = v as f32;
                *grad = g;
            });
        (values, grads)
    }

    pub fn value_of_warped(&self, fixed: &Volume, warped_values: &[f32]) -> Result<f64> {
        let h = JointHistogram::build_with_ranges(
            fixed,
            warped_values,
            self.bins,
            self.range_f,
            self.range_m,
        )?;
        nmi_from_histogram(&h)
    }

    /// E_NMI of the moving image warped by `field`.
    pub fn value(&self, fixed: &Volume, moving: &Volume, field: &DenseField) -> Result<f64> {
        let warped = warp(moving, field, Interp::Trilinear)?;
        self.value_of_warped(fixed, &warped.data)
    }

    /// Analytic ∂E_NMI/∂d per voxel: entropy derivatives through the
    /// partial-volume bin weights, chained with the trilinear intensity
    /// gradient of the moving image at the warped position. Zero
    /// probabilities are replaced by 1/(2 N_V) before taking logarithms.
    pub fn gradient(
        &self,
        fixed: &Volume,
        moving: &Volume,
        field: &DenseField,
    ) -> Result<DenseField> {
        if fixed.dims != field.dims {
            return Err(Error::DimensionMismatch {
                context: "nmi gradient fixed vs field",
                left: fixed.dims,
                right: field.dims,
            });
        }
        let (warped, image_grads) = self.warp_with_gradients(moving, field);
        let hist = JointHistogram::build_with_ranges(
            fixed,
            &warped,
            self.bins,
            self.range_f,
            self.range_m,
        )?;
        let bins = self.bins;
        let n_v = fixed.data.len() as f64;
        let floor = 1.0 / (2.0 * n_v);

        let p_a = hist.marginal_fixed();
        let p_b = hist.marginal_moving();
        let h_a = entropy(&p_a);
        let h_b = entropy(&p_b);
        let h_ab = entropy(&hist.joint);
        if h_ab <= 0.0 {
            return Err(Error::DegeneratePair);
        }

        // dE/dp(i,j) for E = -(H_A+H_B)/H_AB, with the zero-probability
        // floor applied inside the logarithms.
        let ln_floor = |p: f64| p.max(floor).ln();
        let da: Vec<f64> = p_a.iter().map(|&p| -(ln_floor(p) + 1.0)).collect();
        let db: Vec<f64> = p_b.iter().map(|&p| -(ln_floor(p) + 1.0)).collect();
        let denom = h_ab * h_ab;
        let mut coeff = vec![0f64; bins * bins];
        for i in 0..bins {
            for j in 0..bins {
                let dab = -(ln_floor(hist.joint[i * bins + j]) + 1.0);
                coeff[i * bins + j] = -((da[i] + db[j]) * h_ab - (h_a + h_b) * dab) / denom;
            }
        }

        let scale_m = {
            let (lo, hi) = (self.range_m.0 as f64, self.range_m.1 as f64);
            if hi > lo {
                (bins - 1) as f64 / (hi - lo)
            } else {
                0.0
            }
        };
        let range_m = self.range_m;
        let mut out = DenseField::zeros(field.dims);
        out.data
            .par_iter_mut()
            .enumerate()
            .for_each(|(idx, slot)| {
                let m = warped[idx];
                // Clamped samples sit outside the range; their bin weights
                // do not respond to displacement.
                let (lo, hi) = (range_m.0, range_m.1);
                if !(hi > lo) || m <= lo || m >= hi {
                    return;
                }
                let (ia, fa) = bin_split(fixed.data[idx], self.range_f, bins);
                let (jb, fb) = bin_split(m, range_m, bins);
                // d(mass)/d(fb) per cell depends on the coupling branch.
                let de_dfb = if fb <= fa {
                    coeff[(ia + 1) * bins + jb + 1] - coeff[(ia + 1) * bins + jb]
                } else {
                    coeff[ia * bins + jb + 1] - coeff[ia * bins + jb]
                } / n_v;
                let de_dm = de_dfb * scale_m;
                let g = image_grads[idx];
                *slot = [de_dm * g[0], de_dm * g[1], de_dm * g[2]];
            });
        Ok(out)
    }
}

/// Standalone NMI gradient; ranges are resolved at the supplied field.
pub fn nmi_gradient(fixed: &Volume, moving: &Volume, field: &DenseField) -> Result<DenseField> {
    let warped = warp(moving, field, Interp::Trilinear)?;
    let ctx = NmiContext {
        bins: DEFAULT_BINS,
        range_f: percentile_range(fixed),
        range_m: percentile_range(&warped),
    };
    ctx.gradient(fixed, moving, field)
}

// ---------------------------------------------------------------------------
// Descriptor measure
// ---------------------------------------------------------------------------

/// Descriptor dissimilarity against a fixed image whose descriptor field is
/// computed once and reused.
#[derive(Debug, Clone)]
pub struct MindSimilarity {
    pub params: MindParams,
    pub fixed_field: MindField,
}

impl MindSimilarity {
    pub fn new(fixed: &Volume, params: MindParams) -> Result<Self> {
        let fixed_field = mind::compute_mind(fixed, &params)?;
        Ok(MindSimilarity {
            params,
            fixed_field,
        })
    }

    /// Warps the moving image, recomputes its descriptors, and sums squared
    /// pointwise descriptor differences.
    pub fn value(&self, moving: &Volume, field: &DenseField) -> Result<f64> {
        let warped = warp(moving, field, Interp::Trilinear)?;
        let warped_field = mind::compute_mind(&warped, &self.params)?;
        mind::mind_total(&self.fixed_field, &warped_field)
    }

    /// Semi-analytic gradient: the fixed descriptor is constant and the
    /// warped descriptor responds to displacement like a translating field,
    /// so its spatial central differences stand in for its derivative.
    pub fn gradient(&self, moving: &Volume, field: &DenseField) -> Result<DenseField> {
        let warped = warp(moving, field, Interp::Trilinear)?;
        let warped_field = mind::compute_mind(&warped, &self.params)?;
        let dims = field.dims;
        let channels = warped_field.channels;
        let mut out = DenseField::zeros(dims);
        let fixed_field = &self.fixed_field;
        out.data
            .par_iter_mut()
            .enumerate()
            .for_each(|(idx, slot)| {
                let x = idx % dims[0];
                let y = (idx / dims[0]) % dims[1];
                let z = idx / (dims[0] * dims[1]);
                let sa = fixed_field.voxel(idx);
                let sw = warped_field.voxel(idx);
                let mut e = 0f64;
                for c in 0..channels {
                    e += (sw[c] as f64 - sa[c] as f64).abs();
                }
                e /= channels as f64;
                if e == 0.0 {
                    return;
                }
                let mut g = [0f64; 3];
                for c in 0..channels {
                    let diff = sw[c] as f64 - sa[c] as f64;
                    if diff == 0.0 {
                        continue;
                    }
                    let sign = diff.signum();
                    let lo_x = x.saturating_sub(1);
                    let hi_x = (x + 1).min(dims[0] - 1);
                    let lo_y = y.saturating_sub(1);
                    let hi_y = (y + 1).min(dims[1] - 1);
                    let lo_z = z.saturating_sub(1);
                    let hi_z = (z + 1).min(dims[2] - 1);
                    let dx = (warped_field.at(hi_x, y, z, c) as f64
                        - warped_field.at(lo_x, y, z, c) as f64)
                        / (hi_x - lo_x).max(1) as f64;
                    let dy = (warped_field.at(x, hi_y, z, c) as f64
                        - warped_field.at(x, lo_y, z, c) as f64)
                        / (hi_y - lo_y).max(1) as f64;
                    let dz = (warped_field.at(x, y, hi_z, c) as f64
                        - warped_field.at(x, y, lo_z, c) as f64)
                        / (hi_z - lo_z).max(1) as f64;
                    g[0] += sign * dx;
                    g[1] += sign * dy;
                    g[2] += sign * dz;
                }
                let w = 2.0 * e / channels as f64;
                *slot = [w * g[0], w * g[1], w * g[2]];
            });
        Ok(out)
    }
}

/// Descriptor dissimilarity of `moving` warped by `field` against `fixed`.
pub fn mind_dissimilarity(
    fixed: &Volume,
    moving: &Volume,
    field: &DenseField,
    params: &MindParams,
) -> Result<f64> {
    MindSimilarity::new(fixed, params.clone())?.value(moving, field)
}

/// Semi-analytic descriptor gradient; see [`MindSimilarity::gradient`].
pub fn mind_gradient(
    fixed: &Volume,
    moving: &Volume,
    field: &DenseField,
    params: &MindParams,
) -> Result<DenseField> {
    MindSimilarity::new(fixed, params.clone())?.gradient(moving, field)
}

// ---------------------------------------------------------------------------
// Local normalized cross-correlation
// ---------------------------------------------------------------------------

/// Box sum along one axis with the window truncated at the borders.
/// Inclusive per-line running sums (serial, fixed order) followed by a
/// parallel gather keep the result thread-count independent.
fn box_axis(dims: [usize; 3], data: &[f64], axis: usize, radius: usize) -> Vec<f64> {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let extent = dims[axis];
    let mut cumsum = data.to_vec();
    for idx in 0..cumsum.len() {
        let coord = (idx / stride) % extent;
        if coord > 0 {
            cumsum[idx] += cumsum[idx - stride];
        }
    }
    let mut out = vec![0f64; data.len()];
    out.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        let coord = (idx / stride) % extent;
        let lo = coord.saturating_sub(radius);
        let hi = (coord + radius).min(extent - 1);
        let upper = cumsum[idx + (hi - coord) * stride];
        *slot = if lo == 0 {
            upper
        } else {
            upper - cumsum[idx - (coord - lo + 1) * stride]
        };
    });
    out
}

fn box_filter(dims: [usize; 3], data: &[f64], radius: usize) -> Vec<f64> {
    let a = box_axis(dims, data, 0, radius);
    let b = box_axis(dims, &a, 1, radius);
    box_axis(dims, &b, 2, radius)
}

/// Per-voxel truncated window sample counts.
fn window_counts(dims: [usize; 3], radius: usize) -> Vec<f64> {
    let len = |extent: usize, i: usize| -> f64 {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(extent - 1);
        (hi - lo + 1) as f64
    };
    let mut counts = vec![0f64; voxel_count(dims)];
    counts.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        let x = idx % dims[0];
        let y = (idx / dims[0]) % dims[1];
        let z = idx / (dims[0] * dims[1]);
        *slot = len(dims[0], x) * len(dims[1], y) * len(dims[2], z);
    });
    counts
}

struct LnccWindows {
    counts: Vec<f64>,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn lncc_windows(dims: [usize; 3], a: &[f64], b: &[f64], radius: usize) -> LnccWindows {
    let n = a.len();
    let aa: Vec<f64> = (0..n).into_par_iter().map(|i| a[i] * a[i]).collect();
    let bb: Vec<f64> = (0..n).into_par_iter().map(|i| b[i] * b[i]).collect();
    let ab: Vec<f64> = (0..n).into_par_iter().map(|i| a[i] * b[i]).collect();
    let s_a = box_filter(dims, a, radius);
    let s_b = box_filter(dims, b, radius);
    let s_aa = box_filter(dims, &aa, radius);
    let s_bb = box_filter(dims, &bb, radius);
    let s_ab = box_filter(dims, &ab, radius);
    let counts = window_counts(dims, radius);
    let mut w = LnccWindows {
        counts: counts.clone(),
        mean_a: vec![0.0; n],
        mean_b: vec![0.0; n],
        var_a: vec![0.0; n],
        var_b: vec![0.0; n],
        cov: vec![0.0; n],
    };
    w.mean_a
        .par_iter_mut()
        .zip(w.mean_b.par_iter_mut())
        .zip(w.var_a.par_iter_mut())
        .zip(w.var_b.par_iter_mut())
        .zip(w.cov.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((((ma, mb), va), vb), cov))| {
            let c = counts[i];
            *ma = s_a[i] / c;
            *mb = s_b[i] / c;
            *va = s_aa[i] / c - *ma * *ma;
            *vb = s_bb[i] / c - *mb * *mb;
            *cov = s_ab[i] / c - *ma * *mb;
        });
    w
}

/// Local NCC dissimilarity: 1 minus the mean squared local correlation over
/// (2r+1)³ windows truncated at the borders.
pub fn lncc_dissimilarity(fixed: &Volume, warped_moving: &Volume, radius: usize) -> Result<f64> {
    if fixed.dims != warped_moving.dims {
        return Err(Error::DimensionMismatch {
            context: "lncc inputs",
            left: fixed.dims,
            right: warped_moving.dims,
        });
    }
    if radius < 1 {
        return Err(Error::invalid("lncc window radius must be at least 1"));
    }
    let a: Vec<f64> = fixed.data.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = warped_moving.data.iter().map(|&v| v as f64).collect();
    let w = lncc_windows(fixed.dims, &a, &b, radius);
    let n = a.len();
    let sum = deterministic_sum(n, |i| {
        if w.var_a[i] < LNCC_VARIANCE_FLOOR || w.var_b[i] < LNCC_VARIANCE_FLOOR {
            0.0
        } else {
            w.cov[i] * w.cov[i] / (w.var_a[i] * w.var_b[i])
        }
    });
    Ok(1.0 - sum / n as f64)
}

/// Analytic gradient of [`lncc_dissimilarity`] of the warped moving image
/// with respect to the displacement field.
pub fn lncc_gradient(
    fixed: &Volume,
    moving: &Volume,
    field: &DenseField,
    radius: usize,
) -> Result<DenseField> {
    if fixed.dims != field.dims {
        return Err(Error::DimensionMismatch {
            context: "lncc gradient fixed vs field",
            left: fixed.dims,
            right: field.dims,
        });
    }
    let dims = field.dims;
    let n = voxel_count(dims);
    // Warped values and image gradients.
    let mut b = vec![0f64; n];
    let mut image_grads = vec![[0f64; 3]; n];
    b.par_iter_mut()
        .zip(image_grads.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (val, grad))| {
            let x = idx % dims[0];
            let y = (idx / dims[0]) % dims[1];
            let z = idx / (dims[0] * dims[1]);
            let d = field.data[idx];
            let (v, g) =
                moving.sample_with_gradient([x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]);
            *val = v;
            *grad = g;
        });
    let a: Vec<f64> = fixed.data.iter().map(|&v| v as f64).collect();
    let w = lncc_windows(dims, &a, &b, radius);

    // Per-window coefficients of the correlation derivative.
    let mut alpha = vec![0f64; n]; // cov / (va vb n)
    let mut beta = vec![0f64; n]; // cov^2 / (va vb^2 n)
    let mut alpha_ma = vec![0f64; n];
    let mut beta_mb = vec![0f64; n];
    alpha
        .par_iter_mut()
        .zip(beta.par_iter_mut())
        .zip(alpha_ma.par_iter_mut())
        .zip(beta_mb.par_iter_mut())
        .enumerate()
        .for_each(|(i, (((al, be), ama), bmb))| {
            if w.var_a[i] < LNCC_VARIANCE_FLOOR || w.var_b[i] < LNCC_VARIANCE_FLOOR {
                return;
            }
            let va_vb = w.var_a[i] * w.var_b[i];
            let c = w.cov[i];
            *al = c / (va_vb * w.counts[i]);
            *be = c * c / (w.var_a[i] * w.var_b[i] * w.var_b[i] * w.counts[i]);
            *ama = *al * w.mean_a[i];
            *bmb = *be * w.mean_b[i];
        });
    let t1 = box_filter(dims, &alpha, radius);
    let t2 = box_filter(dims, &alpha_ma, radius);
    let t3 = box_filter(dims, &beta, radius);
    let t4 = box_filter(dims, &beta_mb, radius);

    let mut out = DenseField::zeros(dims);
    let n_f = n as f64;
    out.data
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, slot)| {
            let de_db = -(2.0 / n_f) * (a[i] * t1[i] - t2[i] - b[i] * t3[i] + t4[i]);
            let g = image_grads[i];
            *slot = [de_db * g[0], de_db * g[1], de_db * g[2]];
        });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Combined measure
// ---------------------------------------------------------------------------

/// How the descriptor term is scaled against NMI in the combined measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleStrategy {
    /// Use `fixed_s` as given.
    Fixed,
    /// Ratio of node-gradient norms at the probe state.
    InitialGradient,
    /// Ratio of dissimilarity changes from the initial to the probe state.
    DissimilarityChange,
}

/// Parameters of the combined NMI + descriptor measure.
#[derive(Debug, Clone)]
pub struct CombineParams {
    /// Weight of the NMI term, in [0, 1].
    pub beta: f64,
    pub strategy: ScaleStrategy,
    /// Scale used when `strategy` is [`ScaleStrategy::Fixed`].
    pub fixed_s: f64,
}

impl CombineParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!(
                "beta must lie in [0,1], got {}",
                self.beta
            )));
        }
        if !(self.fixed_s > 0.0) {
            return Err(Error::invalid(format!(
                "fixed_s must be positive, got {}",
                self.fixed_s
            )));
        }
        Ok(())
    }
}

impl Default for CombineParams {
    fn default() -> Self {
        CombineParams {
            beta: 0.8,
            strategy: ScaleStrategy::InitialGradient,
            fixed_s: 1.0,
        }
    }
}

fn node_grad_norm(grid: &ControlGrid, dense: &DenseField) -> Result<f64> {
    let nodes = grid.pullback_to_nodes(dense)?;
    Ok(nodes
        .iter()
        .map(|g| g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
        .sum::<f64>()
        .sqrt())
}

/// Resolves the descriptor scale `s` at a probe displacement state.
///
/// Strategy `InitialGradient` compares node-space gradient norms of the two
/// terms at the probe; `DissimilarityChange` compares how much each term
/// moved between the zero state and the probe.
pub fn combine_scale(
    fixed: &Volume,
    moving: &Volume,
    probe: &ControlGrid,
    params: &CombineParams,
    mind_params: &MindParams,
    bins: usize,
) -> Result<f64> {
    params.validate()?;
    match params.strategy {
        ScaleStrategy::Fixed => Ok(params.fixed_s),
        ScaleStrategy::InitialGradient => {
            let field = probe.interpolate_dense();
            let ctx = NmiContext::new(fixed, moving, bins);
            let g_nmi = ctx.gradient(fixed, moving, &field)?;
            let sim = MindSimilarity::new(fixed, mind_params.clone())?;
            let g_mind = sim.gradient(moving, &field)?;
            let num = node_grad_norm(probe, &g_nmi)?;
            let den = node_grad_norm(probe, &g_mind)?;
            if den < SCALE_DENOM_FLOOR {
                return Err(Error::DegenerateScaleProbe);
            }
            Ok(num / den)
        }
        ScaleStrategy::DissimilarityChange => {
            if probe.max_disp_norm() == 0.0 {
                return Err(Error::DegenerateScaleProbe);
            }
            let zero = DenseField::zeros(probe.volume_dims);
            let field = probe.interpolate_dense();
            let ctx = NmiContext::new(fixed, moving, bins);
            let nmi_0 = ctx.value(fixed, moving, &zero)?;
            let nmi_p = ctx.value(fixed, moving, &field)?;
            let sim = MindSimilarity::new(fixed, mind_params.clone())?;
            let mind_0 = sim.value(moving, &zero)?;
            let mind_p = sim.value(moving, &field)?;
            let den = (mind_0 - mind_p).abs();
            if den < SCALE_DENOM_FLOOR {
                return Err(Error::DegenerateScaleProbe);
            }
            Ok((nmi_0 - nmi_p).abs() / den)
        }
    }
}

/// `β·E_NMI + (1−β)·s·E_MIND` of `moving` warped by `field`.
pub fn combined_dissimilarity(
    fixed: &Volume,
    moving: &Volume,
    field: &DenseField,
    beta: f64,
    s: f64,
    mind_params: &MindParams,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0,1], got {beta}")));
    }
    if !(s > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {s}")));
    }
    let warped = warp(moving, field, Interp::Trilinear)?;
    let e_nmi = nmi_dissimilarity(fixed, &warped)?;
    let e_mind = mind_dissimilarity(fixed, moving, field, mind_params)?;
    Ok(beta * e_nmi + (1.0 - beta) * s * e_mind)
}
