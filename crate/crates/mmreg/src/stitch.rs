//! Sliding-window tile extraction and stride-averaged reconstruction.
//!
//! A [`TilePlan`] covers a volume with overlapping tiles whose origins sit
//! on a stride lattice; the last tile per axis is clamped inward so every
//! voxel is covered without padding. [`stitch_map`] pushes each tile
//! through an arbitrary mapping and rebuilds the volume as the per-voxel
//! average of all overlapping mapped tiles.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Volume};

/// Tile coverage of a volume: tile shape, stride lattice, and the explicit
/// origin list (edge origins clamped inward).
#[derive(Debug, Clone)]
pub struct TilePlan {
    pub volume_dims: [usize; 3],
    pub tile_dims: [usize; 3],
    pub strides: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + window <= extent {
        out.push(o);
        o += stride;
    }
    let last = extent - window;
    if *out.last().expect("window fits at least once") != last {
        out.push(last);
    }
    out
}

/// Lays out tile origins at stride multiples, clamping the final origin per
/// axis to `dims − tile_dims` so coverage is complete.
pub fn plan_tiles(
    dims: [usize; 3],
    tile_dims: [usize; 3],
    strides: [usize; 3],
) -> Result<TilePlan> {
    for a in 0..3 {
        if tile_dims[a] == 0 || tile_dims[a] > dims[a] {
            return Err(Error::invalid(format!(
                "tile extent {} exceeds volume extent {} on axis {a}",
                tile_dims[a], dims[a]
            )));
        }
        if strides[a] == 0 || strides[a] > tile_dims[a] {
            return Err(Error::invalid(format!(
                "stride {} outside [1, tile extent {}] on axis {a}",
                strides[a], tile_dims[a]
            )));
        }
    }
    let xs = axis_origins(dims[0], tile_dims[0], strides[0]);
    let ys = axis_origins(dims[1], tile_dims[1], strides[1]);
    let zs = axis_origins(dims[2], tile_dims[2], strides[2]);
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(TilePlan {
        volume_dims: dims,
        tile_dims,
        strides,
        origins,
    })
}

/// Copies one tile out of the volume.
pub fn extract_tile(v: &Volume, origin: [usize; 3], tile_dims: [usize; 3]) -> Volume {
    let mut tile = Volume::zeros(tile_dims, v.spacing);
    for tz in 0..tile_dims[2] {
        for ty in 0..tile_dims[1] {
            let src = v.index(origin[0], origin[1] + ty, origin[2] + tz);
            let dst = linear_index(tile_dims, 0, ty, tz);
            tile.data[dst..dst + tile_dims[0]]
                .copy_from_slice(&v.data[src..src + tile_dims[0]]);
        }
    }
    tile
}

/// Per-voxel count of tiles covering each position.
pub fn coverage_counts(plan: &TilePlan) -> Vec<u32> {
    let mut counts = vec![0u32; voxel_count(plan.volume_dims)];
    for &o in &plan.origins {
        for tz in 0..plan.tile_dims[2] {
            for ty in 0..plan.tile_dims[1] {
                let base = linear_index(plan.volume_dims, o[0], o[1] + ty, o[2] + tz);
                for c in &mut counts[base..base + plan.tile_dims[0]] {
                    *c += 1;
                }
            }
        }
    }
    counts
}

/// Maps every tile through `mapper` and reconstructs the volume as the
/// per-voxel mean of the overlapping mapped tiles. Tiles map in parallel;
/// accumulation runs serially in plan order, so the result is independent
/// of thread count.
pub fn stitch_map<F>(v: &Volume, plan: &TilePlan, mapper: F) -> Result<Volume>
where
    F: Fn(&Volume) -> Result<Volume> + Sync,
{
    if plan.volume_dims != v.dims {
        return Err(Error::DimensionMismatch {
            context: "stitch plan vs volume",
            left: plan.volume_dims,
            right: v.dims,
        });
    }
    let mapped: Vec<Volume> = plan
        .origins
        .par_iter()
        .map(|&o| {
            let tile = extract_tile(v, o, plan.tile_dims);
            let out = mapper(&tile)?;
            if out.dims != plan.tile_dims {
                return Err(Error::DimensionMismatch {
                    context: "mapper output vs tile",
                    left: out.dims,
                    right: plan.tile_dims,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut acc = vec![0f64; voxel_count(v.dims)];
    let mut counts = vec![0u32; acc.len()];
    for (tile, &o) in mapped.iter().zip(&plan.origins) {
        for tz in 0..plan.tile_dims[2] {
            for ty in 0..plan.tile_dims[1] {
                let src = linear_index(plan.tile_dims, 0, ty, tz);
                let dst = linear_index(v.dims, o[0], o[1] + ty, o[2] + tz);
                for tx in 0..plan.tile_dims[0] {
                    acc[dst + tx] += tile.data[src + tx] as f64;
                    counts[dst + tx] += 1;
                }
            }
        }
    }
    let mut out = Volume::zeros(v.dims, v.spacing);
    out.data
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, x)| *x = (acc[i] / counts[i] as f64) as f32);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::hash_unit;

    fn gradient_volume(dims: [usize; 3]) -> Volume {
        let mut v = Volume::zeros(dims, [1.0; 3]);
        for (i, x) in v.data.iter_mut().enumerate() {
            let xi = i % dims[0];
            let yi = (i / dims[0]) % dims[1];
            let zi = i / (dims[0] * dims[1]);
            *x = xi as f32 + 0.5 * yi as f32 + 0.25 * zi as f32;
        }
        v
    }

    #[test]
    fn origin_lattice_matches_worked_examples() {
        let p = plan_tiles([10, 4, 4], [4, 4, 4], [2, 4, 4]).unwrap();
        let xs: Vec<usize> = p.origins.iter().map(|o| o[0]).collect();
        assert_eq!(xs, vec![0, 2, 4, 6]);

        let p = plan_tiles([11, 4, 4], [4, 4, 4], [4, 4, 4]).unwrap();
        let xs: Vec<usize> = p.origins.iter().map(|o| o[0]).collect();
        assert_eq!(xs, vec![0, 4, 7]);

        let p = plan_tiles([8, 8, 8], [8, 8, 8], [4, 4, 4]).unwrap();
        assert_eq!(p.origins, vec![[0, 0, 0]]);
    }

    #[test]
    fn oversized_tile_and_bad_stride_are_rejected() {
        assert!(plan_tiles([8, 8, 8], [9, 8, 8], [1, 1, 1]).is_err());
        assert!(plan_tiles([8, 8, 8], [4, 4, 4], [5, 1, 1]).is_err());
        assert!(plan_tiles([8, 8, 8], [4, 4, 4], [0, 1, 1]).is_err());
    }

    #[test]
    fn coverage_matches_brute_force_and_is_positive() {
        let plan = plan_tiles([13, 10, 9], [4, 4, 3], [3, 2, 3]).unwrap();
        let counts = coverage_counts(&plan);
        let mut brute = vec![0u32; voxel_count([13, 10, 9])];
        for &o in &plan.origins {
            for z in o[2]..o[2] + 3 {
                for y in o[1]..o[1] + 4 {
                    for x in o[0]..o[0] + 4 {
                        brute[linear_index([13, 10, 9], x, y, z)] += 1;
                    }
                }
            }
        }
        assert_eq!(counts, brute);
        assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn identity_mapper_reproduces_input_bit_exactly() {
        let dims = [20, 16, 12];
        let mut v = gradient_volume(dims);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x += hash_unit(5, i as u64) as f32;
        }
        let plan = plan_tiles(dims, [8, 8, 6], [4, 4, 3]).unwrap();
        let out = stitch_map(&v, &plan, |t| Ok(t.clone())).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn constant_offset_commutes_with_averaging() {
        let dims = [15, 11, 9];
        let v = gradient_volume(dims);
        let plan = plan_tiles(dims, [6, 5, 4], [3, 3, 2]).unwrap();
        let out = stitch_map(&v, &plan, |t| {
            let mut m = t.clone();
            for x in &mut m.data {
                *x += 10.0;
            }
            Ok(m)
        })
        .unwrap();
        for (got, want) in out.data.iter().zip(&v.data) {
            assert!((got - (want + 10.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_fill_matches_brute_force_accumulator() {
        let dims = [12, 10, 8];
        let v = gradient_volume(dims);
        let plan = plan_tiles(dims, [5, 4, 4], [2, 3, 2]).unwrap();
        let mean_fill = |t: &Volume| -> Result<Volume> {
            let m = t.data.iter().map(|&x| x as f64).sum::<f64>() / t.data.len() as f64;
            Ok(Volume::new(t.dims, t.spacing, vec![m as f32; t.data.len()]).unwrap())
        };
        let got = stitch_map(&v, &plan, mean_fill).unwrap();
        // Brute-force oracle.
        let mut acc = vec![0f64; voxel_count(dims)];
        let mut cnt = vec![0u32; acc.len()];
        for &o in &plan.origins {
            let tile = extract_tile(&v, o, plan.tile_dims);
            let m = tile.data.iter().map(|&x| x as f64).sum::<f64>() / tile.data.len() as f64;
            for z in 0..plan.tile_dims[2] {
                for y in 0..plan.tile_dims[1] {
                    for x in 0..plan.tile_dims[0] {
                        let i = linear_index(dims, o[0] + x, o[1] + y, o[2] + z);
                        acc[i] += m;
                        cnt[i] += 1;
                    }
                }
            }
        }
        for (i, got) in got.data.iter().enumerate() {
            let want = (acc[i] / cnt[i] as f64) as f32;
            assert!((got - want).abs() < 1e-6, "voxel {i}: {got} vs {want}");
        }
    }

    #[test]
    fn stitching_is_linear_in_the_mapper() {
        let dims = [14, 12, 10];
        let v = gradient_volume(dims);
        let plan = plan_tiles(dims, [6, 6, 5], [3, 4, 3]).unwrap();
        let f = |t: &Volume| -> Result<Volume> {
            let mut m = t.clone();
            for x in &mut m.data {
                *x = *x * 0.5 + 1.0;
            }
            Ok(m)
        };
        let g = |t: &Volume| -> Result<Volume> {
            let mut m = t.clone();
            for x in &mut m.data {
                *x = *x * -0.25 + 2.0;
            }
            Ok(m)
        };
        let (alpha, beta) = (2.0f32, -0.5f32);
        let combined = stitch_map(&v, &plan, |t| {
            let mf = f(t)?;
            let mg = g(t)?;
            let mut m = mf.clone();
            for (x, (a, b)) in m.data.iter_mut().zip(mf.data.iter().zip(&mg.data)) {
                *x = alpha * a + beta * b;
            }
            Ok(m)
        })
        .unwrap();
        let sf = stitch_map(&v, &plan, f).unwrap();
        let sg = stitch_map(&v, &plan, g).unwrap();
        for (i, got) in combined.data.iter().enumerate() {
            let want = alpha * sf.data[i] + beta * sg.data[i];
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn mapper_dim_mismatch_is_an_error() {
        let v = gradient_volume([8, 8, 8]);
        let plan = plan_tiles([8, 8, 8], [4, 4, 4], [4, 4, 4]).unwrap();
        let bad = stitch_map(&v, &plan, |_| Ok(Volume::zeros([3, 3, 3], [1.0; 3])));
        assert!(bad.is_err());
    }
}
