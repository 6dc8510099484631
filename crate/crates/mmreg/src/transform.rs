//! Displacement transforms: coarse control grids and dense per-voxel fields.
//!
//! A [`ControlGrid`] stores one displacement vector per lattice node; the
//! lattice covers the volume plus one node layer beyond each face, with node
//! `g` sitting at voxel coordinate `(g - 1) * spacing_vox`. Dense fields are
//! produced by trilinear interpolation of the node values, so the transform
//! is piecewise linear, exact at the nodes, and its adjoint (used to pull
//! voxel gradients back onto nodes) is the exact transpose of that
//! interpolation.
//!
//! All displacements are in voxel units of the grid they are defined on.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::util::norm3;
use crate::volume::{linear_index, voxel_count, Interp, Volume};

/// Fixed-point inversion iteration cap.
pub const DEFAULT_INVERT_ITERS: usize = 20;
/// Fixed-point inversion convergence tolerance in voxels.
pub const DEFAULT_INVERT_TOL: f64 = 0.01;

/// Coarse displacement lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    /// Node spacing in voxels of the target volume, at least 2.
    pub spacing_vox: usize,
    /// Node counts per axis, including one boundary layer per side.
    pub grid_dims: [usize; 3],
    /// Extent of the voxel domain this grid covers.
    pub volume_dims: [usize; 3],
    /// Node displacements, x-fastest like volumes.
    pub disp: Vec<[f64; 3]>,
}

/// Per-voxel displacement field on a volume's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    pub dims: [usize; 3],
    pub data: Vec<[f64; 3]>,
}

/// Outcome of fixed-point field inversion.
#[derive(Debug, Clone, Copy)]
pub struct InversionReport {
    pub iterations: usize,
    /// Max voxel update norm at the last iteration.
    pub residual: f64,
    pub converged: bool,
}

impl ControlGrid {
    /// Zero-displacement grid covering `volume_dims`.
    pub fn new(volume_dims: [usize; 3], spacing_vox: usize) -> Result<Self> {
        if spacing_vox < 2 {
            return Err(Error::invalid(format!(
                "control grid spacing must be at least 2 voxels, got {spacing_vox}"
            )));
        }
        if volume_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("control grid needs a non-empty volume"));
        }
        let mut grid_dims = [0usize; 3];
        for a in 0..3 {
            grid_dims[a] = (volume_dims[a] - 1).div_ceil(spacing_vox) + 3;
        }
        let n = grid_dims[0] * grid_dims[1] * grid_dims[2];
        Ok(ControlGrid {
            spacing_vox,
            grid_dims,
            volume_dims,
            disp: vec![[0.0; 3]; n],
        })
    }

    pub fn node_count(&self) -> usize {
        self.disp.len()
    }

    /// Voxel coordinate of node `(gx, gy, gz)`; boundary nodes lie outside
    /// the volume.
    pub fn node_position(&self, g: [usize; 3]) -> [f64; 3] {
        let s = self.spacing_vox as f64;
        [
            (g[0] as f64 - 1.0) * s,
            (g[1] as f64 - 1.0) * s,
            (g[2] as f64 - 1.0) * s,
        ]
    }

    #[inline]
    pub fn node_index(&self, gx: usize, gy: usize, gz: usize) -> usize {
        gx + self.grid_dims[0] * (gy + self.grid_dims[1] * gz)
    }

    /// Lower node index and fractional weight along one axis for a
    /// continuous voxel coordinate. Positions beyond the lattice clamp to
    /// the outermost cell.
    #[inline]
    fn axis_span(&self, axis: usize, p: f64) -> (usize, f64) {
        let s = self.spacing_vox as f64;
        let u = p / s;
        let g_max = self.grid_dims[axis] - 2;
        let g = (u.floor() as i64 + 1).clamp(0, g_max as i64) as usize;
        let t = (u - (g as f64 - 1.0)).clamp(0.0, 1.0);
        (g, t)
    }

    /// Trilinear interpolation of node displacements at a continuous voxel
    /// coordinate.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let (gx, tx) = self.axis_span(0, p[0]);
        let (gy, ty) = self.axis_span(1, p[1]);
        let (gz, tz) = self.axis_span(2, p[2]);
        let mut out = [0f64; 3];
        for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                let w_yz = wy * wz;
                if w_yz == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    let w = wx * w_yz;
                    if w == 0.0 {
                        continue;
                    }
                    let n = self.disp[self.node_index(gx + dx, gy + dy, gz + dz)];
                    out[0] += w * n[0];
                    out[1] += w * n[1];
                    out[2] += w * n[2];
                }
            }
        }
        out
    }

    /// Densifies the grid over its full voxel domain.
    pub fn interpolate_dense(&self) -> DenseField {
        let dims = self.volume_dims;
        let mut data = vec![[0f64; 3]; voxel_count(dims)];
        data.par_iter_mut().enumerate().for_each(|(idx, slot)| {
            let x = idx % dims[0];
            let y = (idx / dims[0]) % dims[1];
            let z = idx / (dims[0] * dims[1]);
            *slot = self.sample([x as f64, y as f64, z as f64]);
        });
        DenseField { dims, data }
    }

    /// Exact adjoint of [`ControlGrid::interpolate_dense`]: accumulates a
    /// per-voxel vector field onto the nodes with the same trilinear
    /// weights. Satisfies `<pullback(v), k> == <v, interpolate(k)>` for
    /// every node field `k`.
    pub fn pullback_to_nodes(&self, dense: &DenseField) -> Result<Vec<[f64; 3]>> {
        if dense.dims != self.volume_dims {
            return Err(Error::DimensionMismatch {
                context: "pullback field vs control grid domain",
                left: dense.dims,
                right: self.volume_dims,
            });
        }
        let s = self.spacing_vox;
        let dims = self.volume_dims;
        let g_dims = self.grid_dims;
        let n_nodes = self.node_count();
        let mut out = vec![[0f64; 3]; n_nodes];
        out.par_iter_mut().enumerate().for_each(|(node, slot)| {
            let gx = node % g_dims[0];
            let gy = (node / g_dims[0]) % g_dims[1];
            let gz = node / (g_dims[0] * g_dims[1]);
            let g = [gx, gy, gz];
            // Voxels whose interpolation stencil can touch this node.
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for a in 0..3 {
                lo[a] = g[a].saturating_sub(2).saturating_mul(s);
                hi[a] = (g[a] * s).min(dims[a] - 1);
                if lo[a] >= dims[a] {
                    return;
                }
            }
            let mut acc = [0f64; 3];
            for z in lo[2]..=hi[2] {
                let (nz, tz) = self.axis_span(2, z as f64);
                let wz = if nz == gz {
                    1.0 - tz
                } else if nz + 1 == gz {
                    tz
                } else {
                    continue;
                };
                for y in lo[1]..=hi[1] {
                    let (ny, ty) = self.axis_span(1, y as f64);
                    let wy = if ny == gy {
                        1.0 - ty
                    } else if ny + 1 == gy {
                        ty
                    } else {
                        continue;
                    };
                    let w_yz = wz * wy;
                    if w_yz == 0.0 {
                        continue;
                    }
                    for x in lo[0]..=hi[0] {
                        let (nx, tx) = self.axis_span(0, x as f64);
                        let wx = if nx == gx {
                            1.0 - tx
                        } else if nx + 1 == gx {
                            tx
                        } else {
                            continue;
                        };
                        let w = w_yz * wx;
                        if w == 0.0 {
                            continue;
                        }
                        let v = dense.data[linear_index(dims, x, y, z)];
                        acc[0] += w * v[0];
                        acc[1] += w * v[1];
                        acc[2] += w * v[2];
                    }
                }
            }
            *slot = acc;
        });
        Ok(out)
    }

    /// Transfers this grid to a volume with doubled resolution: node values
    /// are interpolated at the positions of the finer grid's nodes and
    /// doubled, since one coarse voxel spans two fine voxels. When
    /// `spacing_vox` is twice this grid's spacing the meshes coincide
    /// physically and the transfer is an exact node copy.
    pub fn upsampled(&self, fine_dims: [usize; 3], spacing_vox: usize) -> Result<ControlGrid> {
        let mut fine = ControlGrid::new(fine_dims, spacing_vox)?;
        let g_dims = fine.grid_dims;
        let values: Vec<[f64; 3]> = (0..fine.node_count())
            .map(|node| {
                let gx = node % g_dims[0];
                let gy = (node / g_dims[0]) % g_dims[1];
                let gz = node / (g_dims[0] * g_dims[1]);
                let p = fine.node_position([gx, gy, gz]);
                let d = self.sample([p[0] / 2.0, p[1] / 2.0, p[2] / 2.0]);
                [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]]
            })
            .collect();
        fine.disp = values;
        Ok(fine)
    }

    /// Replaces node displacements by sampling a dense field at the node
    /// positions (clamped at the boundary layer). If the field equals
    /// `interpolate_dense` of some grid, interior nodes are recovered
    /// exactly.
    pub fn fit_to_field(&mut self, field: &DenseField) -> Result<()> {
        if field.dims != self.volume_dims {
            return Err(Error::DimensionMismatch {
                context: "fit field vs control grid domain",
                left: field.dims,
                right: self.volume_dims,
            });
        }
        let g_dims = self.grid_dims;
        let positions: Vec<[f64; 3]> = (0..self.node_count())
            .map(|node| {
                let gx = node % g_dims[0];
                let gy = (node / g_dims[0]) % g_dims[1];
                let gz = node / (g_dims[0] * g_dims[1]);
                self.node_position([gx, gy, gz])
            })
            .collect();
        self.disp = positions.iter().map(|&p| field.sample_trilinear(p)).collect();
        Ok(())
    }

    /// Largest node displacement norm.
    pub fn max_disp_norm(&self) -> f64 {
        self.disp.iter().map(|&d| norm3(d)).fold(0.0, f64::max)
    }
}

impl DenseField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        DenseField {
            dims,
            data: vec![[0.0; 3]; voxel_count(dims)],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[linear_index(self.dims, x, y, z)]
    }

    /// Trilinear sample with clamp-to-edge, per component.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> [f64; 3] {
        let d = self.dims;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let c = p[a].clamp(0.0, (d[a] - 1) as f64);
            let mut b = c.floor() as usize;
            if d[a] >= 2 && b > d[a] - 2 {
                b = d[a] - 2;
            }
            base[a] = b;
            frac[a] = if d[a] >= 2 { c - b as f64 } else { 0.0 };
        }
        let [x0, y0, z0] = base;
        let x1 = (x0 + 1).min(d[0] - 1);
        let y1 = (y0 + 1).min(d[1] - 1);
        let z1 = (z0 + 1).min(d[2] - 1);
        let [fx, fy, fz] = frac;
        let mut out = [0f64; 3];
        for c in 0..3 {
            let v = |x: usize, y: usize, z: usize| self.data[linear_index(d, x, y, z)][c];
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), fx);
            let c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), fx);
            let c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), fx);
            let c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), fx);
            out[c] = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
        }
        out
    }

    /// Largest per-voxel Euclidean displacement.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|&v| norm3(v)).fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum = crate::util::deterministic_sum(self.data.len(), |i| norm3(self.data[i]));
        sum / self.data.len() as f64
    }

    /// Voxel-wise `0.5 * a + 0.5 * b`.
    pub fn average(a: &DenseField, b: &DenseField) -> Result<DenseField> {
        if a.dims != b.dims {
            return Err(Error::DimensionMismatch {
                context: "field average",
                left: a.dims,
                right: b.dims,
            });
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&u, &v)| [0.5 * (u[0] + v[0]), 0.5 * (u[1] + v[1]), 0.5 * (u[2] + v[2])])
            .collect();
        Ok(DenseField { dims: a.dims, data })
    }

    /// Saves as a 4D MetaImage with the three components fastest-varying.
    pub fn save_mha(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 12);
        for v in &self.data {
            for c in 0..3 {
                bytes.extend_from_slice(&(v[c] as f32).to_le_bytes());
            }
        }
        crate::volume::write_raw_mha(
            path.as_ref(),
            &[3, self.dims[0], self.dims[1], self.dims[2]],
            crate::volume::ElementType::Float,
            &[1.0, 1.0, 1.0, 1.0],
            &[0.0, 0.0, 0.0, 0.0],
            &bytes,
        )
    }

    pub fn load_mha(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = crate::volume::read_raw_mha(path)?;
        if raw.dim_size.len() != 4 || raw.dim_size[0] != 3 {
            return Err(Error::header(
                path,
                "displacement fields are 4D images with 3 components fastest",
            ));
        }
        if raw.element_type != crate::volume::ElementType::Float {
            return Err(Error::header(path, "displacement fields use MET_FLOAT"));
        }
        let dims = [raw.dim_size[1], raw.dim_size[2], raw.dim_size[3]];
        let floats: Vec<f32> = raw
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = floats
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Ok(DenseField { dims, data })
    }
}

/// Pull-back warp: `out[x] = moving[x + field[x]]`, sampled with
/// clamp-to-edge. A zero field reproduces the input bit-exactly.
pub fn warp(moving: &Volume, field: &DenseField, interp: Interp) -> Result<Volume> {
    if moving.dims != field.dims {
        return Err(Error::DimensionMismatch {
            context: "warp volume vs field",
            left: moving.dims,
            right: field.dims,
        });
    }
    let dims = moving.dims;
    let mut out = Volume::zeros(dims, moving.spacing);
    out.origin = moving.origin;
    out.data.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        let x = idx % dims[0];
        let y = (idx / dims[0]) % dims[1];
        let z = idx / (dims[0] * dims[1]);
        let d = field.data[idx];
        let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
        *slot = moving.sample(p, interp);
    });
    Ok(out)
}

/// Functional composition `(f after g)[x] = g[x] + f[x + g[x]]`, so warping
/// by the result equals warping by `g` then by `f`.
pub fn compose(f: &DenseField, g: &DenseField) -> Result<DenseField> {
    if f.dims != g.dims {
        return Err(Error::DimensionMismatch {
            context: "field composition",
            left: f.dims,
            right: g.dims,
        });
    }
    let dims = f.dims;
    let mut out = DenseField::zeros(dims);
    out.data.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        let x = idx % dims[0];
        let y = (idx / dims[0]) % dims[1];
        let z = idx / (dims[0] * dims[1]);
        let gv = g.data[idx];
        let fv = f.sample_trilinear([x as f64 + gv[0], y as f64 + gv[1], z as f64 + gv[2]]);
        *slot = [gv[0] + fv[0], gv[1] + fv[1], gv[2] + fv[2]];
    });
    Ok(out)
}

/// Fixed-point field inversion: iterates `inv <- -field(x + inv(x))` until
/// the largest voxel update drops below `tol` or `max_iters` is reached.
/// Non-convergence is reported, not an error; the best iterate is returned.
pub fn invert(field: &DenseField, max_iters: usize, tol: f64) -> (DenseField, InversionReport) {
    let dims = field.dims;
    let mut inv = DenseField::zeros(dims);
    let mut best = inv.clone();
    let mut best_update = f64::INFINITY;
    let mut report = InversionReport {
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
    };
    for iter in 1..=max_iters {
        let mut next = DenseField::zeros(dims);
        let updates: Vec<f64> = next
            .data
            .par_iter_mut()
            .enumerate()
            .map(|(idx, slot)| {
                let x = idx % dims[0];
                let y = (idx / dims[0]) % dims[1];
                let z = idx / (dims[0] * dims[1]);
                let cur = inv.data[idx];
                let f = field.sample_trilinear([
                    x as f64 + cur[0],
                    y as f64 + cur[1],
                    z as f64 + cur[2],
                ]);
                let new = [-f[0], -f[1], -f[2]];
                *slot = new;
                norm3(crate::util::sub3(new, cur))
            })
            .collect();
        let update = updates.iter().copied().fold(0.0, f64::max);
        inv = next;
        report.iterations = iter;
        report.residual = update;
        if update <= best_update {
            best_update = update;
            best = inv.clone();
        }
        if update < tol {
            report.converged = true;
            return (inv, report);
        }
    }
    (best, report)
}

/// One inverse-consistency averaging step: each field is replaced by the
/// mean of itself and the inverse of its counterpart.
pub fn inverse_consistency_step(
    fwd: &DenseField,
    bwd: &DenseField,
) -> Result<(DenseField, DenseField)> {
    let (inv_bwd, _) = invert(bwd, DEFAULT_INVERT_ITERS, DEFAULT_INVERT_TOL);
    let (inv_fwd, _) = invert(fwd, DEFAULT_INVERT_ITERS, DEFAULT_INVERT_TOL);
    let new_fwd = DenseField::average(fwd, &inv_bwd)?;
    let new_bwd = DenseField::average(bwd, &inv_fwd)?;
    Ok((new_fwd, new_bwd))
}
