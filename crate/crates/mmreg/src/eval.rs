//! Overlap and field-accuracy metrics: per-label Dice, nearest-neighbor
//! label propagation, segmented-volume statistics, and endpoint error
//! against a ground-truth displacement field.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::transform::DenseField;
use crate::util::{deterministic_sum, norm3, sub3};
use crate::volume::LabelVolume;

/// Per-label Dice overlap. The mean averages over labels evaluated (present
/// on at least one side); labels absent from both sides are skipped.
#[derive(Debug, Clone)]
pub struct DiceReport {
    pub per_label: BTreeMap<u32, f64>,
    pub label_names: BTreeMap<u32, String>,
    pub mean: f64,
}

impl DiceReport {
    /// Aligned text table, one row per label plus the mean.
    pub fn to_text(&self) -> String {
        let mut out = String::from("label  name              dice\n");
        for (&label, &d) in &self.per_label {
            let name = self
                .label_names
                .get(&label)
                .map(String::as_str)
                .unwrap_or("-");
            out.push_str(&format!("{label:<6} {name:<16} {d:.3}\n"));
        }
        out.push_str(&format!("mean   {:<16} {:.3}\n", "", self.mean));
        out
    }

    /// CSV rows: label,name,dice.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,name,dice\n");
        for (&label, &d) in &self.per_label {
            let name = self
                .label_names
                .get(&label)
                .map(String::as_str)
                .unwrap_or("");
            out.push_str(&format!("{label},{name},{d:.6}\n"));
        }
        out
    }
}

/// Dice overlap per nonzero label: 2|A∩B| / (|A|+|B|). A label present on
/// exactly one side scores 0.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceReport> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch {
            context: "dice inputs",
            left: a.dims,
            right: b.dims,
        });
    }
    let mut count_a: BTreeMap<u32, u64> = BTreeMap::new();
    let mut count_b: BTreeMap<u32, u64> = BTreeMap::new();
    let mut inter: BTreeMap<u32, u64> = BTreeMap::new();
    for (&la, &lb) in a.data.iter().zip(&b.data) {
        if la > 0 {
            *count_a.entry(la).or_default() += 1;
        }
        if lb > 0 {
            *count_b.entry(lb).or_default() += 1;
        }
        if la > 0 && la == lb {
            *inter.entry(la).or_default() += 1;
        }
    }
    let labels: BTreeSet<u32> = count_a.keys().chain(count_b.keys()).copied().collect();
    let mut per_label = BTreeMap::new();
    for &label in &labels {
        let na = count_a.get(&label).copied().unwrap_or(0);
        let nb = count_b.get(&label).copied().unwrap_or(0);
        let ni = inter.get(&label).copied().unwrap_or(0);
        per_label.insert(label, 2.0 * ni as f64 / (na + nb) as f64);
    }
    let mean = if per_label.is_empty() {
        0.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    let mut label_names = a.label_names.clone();
    for (k, v) in &b.label_names {
        label_names.entry(*k).or_insert_with(|| v.clone());
    }
    Ok(DiceReport {
        per_label,
        label_names,
        mean,
    })
}

/// Nearest-neighbor warp of a label volume: out[x] = labels[round(x + d(x))],
/// rounded half-up and clamped to the volume.
pub fn propagate_labels(labels: &LabelVolume, field: &DenseField) -> Result<LabelVolume> {
    if labels.dims != field.dims {
        return Err(Error::DimensionMismatch {
            context: "label propagation",
            left: labels.dims,
            right: field.dims,
        });
    }
    let dims = labels.dims;
    let mut out = labels.clone();
    out.data
        .par_iter_mut()
        .enumerate()
        .for_each(|(idx, slot)| {
            let x = idx % dims[0];
            let y = (idx / dims[0]) % dims[1];
            let z = idx / (dims[0] * dims[1]);
            let d = field.data[idx];
            let px = (x as f64 + d[0] + 0.5).floor() as i64;
            let py = (y as f64 + d[1] + 0.5).floor() as i64;
            let pz = (z as f64 + d[2] + 0.5).floor() as i64;
            *slot = labels.at_clamped(px, py, pz);
        });
    Ok(out)
}

/// Per-label volume means of two groups, in cm³, with the A/B ratio in
/// percent (undefined when the label is missing from a group).
#[derive(Debug, Clone)]
pub struct VolumeStatsRow {
    pub mean_a_cm3: Option<f64>,
    pub mean_b_cm3: Option<f64>,
    pub ratio_percent: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VolumeStatsReport {
    pub rows: BTreeMap<u32, VolumeStatsRow>,
}

impl VolumeStatsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("label  mean_a_cm3  mean_b_cm3  ratio_pct\n");
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for (&label, row) in &self.rows {
            out.push_str(&format!(
                "{label:<6} {:<11} {:<11} {}\n",
                cell(row.mean_a_cm3),
                cell(row.mean_b_cm3),
                cell(row.ratio_percent),
            ));
        }
        out
    }
}

fn label_volumes_cm3(v: &LabelVolume) -> BTreeMap<u32, f64> {
    let voxel_mm3 = v.spacing[0] as f64 * v.spacing[1] as f64 * v.spacing[2] as f64;
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for &l in &v.data {
        if l > 0 {
            *counts.entry(l).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(l, c)| (l, c as f64 * voxel_mm3 / 1000.0))
        .collect()
}

/// Mean segmented volume per label for two groups of label volumes.
/// Either group may be empty; rows then carry only the populated side.
pub fn volume_stats(group_a: &[LabelVolume], group_b: &[LabelVolume]) -> VolumeStatsReport {
    let mut acc_a: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut acc_b: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for v in group_a {
        for (l, vol) in label_volumes_cm3(v) {
            let e = acc_a.entry(l).or_insert((0.0, 0));
            e.0 += vol;
            e.1 += 1;
        }
    }
    for v in group_b {
        for (l, vol) in label_volumes_cm3(v) {
            let e = acc_b.entry(l).or_insert((0.0, 0));
            e.0 += vol;
            e.1 += 1;
        }
    }
    let labels: BTreeSet<u32> = acc_a.keys().chain(acc_b.keys()).copied().collect();
    let mut rows = BTreeMap::new();
    for &label in &labels {
        let mean_a = acc_a.get(&label).map(|(s, n)| s / *n as f64);
        let mean_b = acc_b.get(&label).map(|(s, n)| s / *n as f64);
        let ratio = match (mean_a, mean_b) {
            (Some(a), Some(b)) if b > 0.0 => Some(100.0 * a / b),
            _ => None,
        };
        rows.insert(
            label,
            VolumeStatsRow {
                mean_a_cm3: mean_a,
                mean_b_cm3: mean_b,
                ratio_percent: ratio,
            },
        );
    }
    VolumeStatsReport { rows }
}

/// Mean and max Euclidean norm of the per-voxel field difference, in voxels.
pub fn endpoint_error(estimated: &DenseField, truth: &DenseField) -> Result<(f64, f64)> {
    if estimated.dims != truth.dims {
        return Err(Error::DimensionMismatch {
            context: "endpoint error inputs",
            left: estimated.dims,
            right: truth.dims,
        });
    }
    let n = estimated.data.len();
    let mean = deterministic_sum(n, |i| norm3(sub3(estimated.data[i], truth.data[i]))) / n as f64;
    let max = estimated
        .data
        .iter()
        .zip(&truth.data)
        .map(|(&e, &t)| norm3(sub3(e, t)))
        .fold(0.0, f64::max);
    Ok((mean, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::hash_unit;
    use crate::volume::linear_index;

    fn cube_labels(dims: [usize; 3], origin: [usize; 3], side: usize, label: u32) -> LabelVolume {
        let mut v = LabelVolume::new(dims, [1.0; 3], vec![0; dims[0] * dims[1] * dims[2]]).unwrap();
        for z in origin[2]..origin[2] + side {
            for y in origin[1]..origin[1] + side {
                for x in origin[0]..origin[0] + side {
                    v.data[linear_index(dims, x, y, z)] = label;
                }
            }
        }
        v
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let dims = [24, 24, 24];
        let mut a = cube_labels(dims, [2, 2, 2], 6, 1);
        for z in 12..18 {
            for y in 12..18 {
                for x in 12..18 {
                    a.data[linear_index(dims, x, y, z)] = 2;
                }
            }
        }
        a.data[linear_index(dims, 0, 23, 23)] = 3;
        let r = dice(&a, &a).unwrap();
        assert_eq!(r.per_label.len(), 3);
        assert!(r.per_label.values().all(|&d| d == 1.0));
        assert_eq!(r.mean, 1.0);

        let b = cube_labels(dims, [16, 2, 2], 6, 1);
        let disjoint = cube_labels(dims, [2, 2, 2], 6, 1);
        let r = dice(&b, &disjoint).unwrap();
        assert_eq!(r.per_label[&1], 0.0);
    }

    #[test]
    fn dice_of_shifted_cube_is_half() {
        let dims = [32, 32, 32];
        let a = cube_labels(dims, [5, 5, 5], 10, 1);
        let b = cube_labels(dims, [10, 5, 5], 10, 1);
        let r = dice(&a, &b).unwrap();
        assert_eq!(r.per_label[&1], 0.5);
    }

    #[test]
    fn dice_is_symmetric_and_scores_one_sided_labels_zero() {
        let dims = [16, 16, 16];
        let a = cube_labels(dims, [2, 2, 2], 5, 1);
        let mut b = cube_labels(dims, [4, 4, 4], 5, 1);
        b.data[linear_index(dims, 15, 15, 15)] = 9;
        let ab = dice(&a, &b).unwrap();
        let ba = dice(&b, &a).unwrap();
        assert_eq!(ab.per_label, ba.per_label);
        assert_eq!(ab.per_label[&9], 0.0);
        assert!(ab.per_label.contains_key(&1));
    }

    #[test]
    fn propagation_by_zero_and_integer_shift_fields() {
        let dims = [16, 16, 16];
        let a = cube_labels(dims, [4, 4, 4], 5, 2);
        let zero = DenseField::zeros(dims);
        let same = propagate_labels(&a, &zero).unwrap();
        assert_eq!(same.data, a.data);

        let mut shift = DenseField::zeros(dims);
        for d in &mut shift.data {
            *d = [3.0, 0.0, 0.0];
        }
        let moved = propagate_labels(&a, &shift).unwrap();
        // Pull-back by +3 in x moves content 3 voxels toward -x.
        for z in 4..9 {
            for y in 4..9 {
                assert_eq!(moved.data[linear_index(dims, 1, y, z)], 2);
                assert_eq!(moved.data[linear_index(dims, 9, y, z)], 0);
            }
        }
    }

    #[test]
    fn propagation_matches_per_voxel_oracle_on_smooth_field() {
        let dims = [12, 12, 12];
        let a = cube_labels(dims, [3, 3, 3], 6, 1);
        let mut field = DenseField::zeros(dims);
        for (i, d) in field.data.iter_mut().enumerate() {
            *d = [
                1.4 * (hash_unit(81, i as u64) - 0.5),
                1.4 * (hash_unit(82, i as u64) - 0.5),
                1.4 * (hash_unit(83, i as u64) - 0.5),
            ];
        }
        let got = propagate_labels(&a, &field).unwrap();
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..12 {
                    let i = linear_index(dims, x, y, z);
                    let d = field.data[i];
                    let want = a.at_clamped(
                        (x as f64 + d[0] + 0.5).floor() as i64,
                        (y as f64 + d[1] + 0.5).floor() as i64,
                        (z as f64 + d[2] + 0.5).floor() as i64,
                    );
                    assert_eq!(got.data[i], want);
                }
            }
        }
    }

    #[test]
    fn volume_stats_worked_example() {
        let mut v =
            LabelVolume::new([20, 20, 20], [1.25, 1.25, 1.25], vec![0; 8000]).unwrap();
        for z in 0..10 {
            for y in 0..10 {
                for x in 0..10 {
                    v.data[linear_index([20, 20, 20], x, y, z)] = 1;
                }
            }
        }
        let report = volume_stats(std::slice::from_ref(&v), std::slice::from_ref(&v));
        let row = &report.rows[&1];
        assert!((row.mean_a_cm3.unwrap() - 1.953125).abs() < 1e-12);
        assert!((row.ratio_percent.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn volume_stats_identical_groups_and_missing_labels() {
        let a = cube_labels([16, 16, 16], [2, 2, 2], 4, 1);
        let b = cube_labels([16, 16, 16], [2, 2, 2], 4, 2);
        let report = volume_stats(&[a.clone(), a.clone()], &[a.clone()]);
        assert!((report.rows[&1].ratio_percent.unwrap() - 100.0).abs() < 1e-9);
        let report = volume_stats(&[a], &[b]);
        assert!(report.rows[&1].ratio_percent.is_none());
        assert!(report.rows[&2].ratio_percent.is_none());
        assert!(report.rows[&1].mean_a_cm3.is_some());
        assert!(report.rows[&2].mean_b_cm3.is_some());
    }

    #[test]
    fn endpoint_error_closed_forms_and_oracle() {
        let dims = [10, 10, 10];
        let zero = DenseField::zeros(dims);
        assert_eq!(endpoint_error(&zero, &zero).unwrap(), (0.0, 0.0));

        let mut est = DenseField::zeros(dims);
        for d in &mut est.data {
            *d = [3.0, 4.0, 0.0];
        }
        let (mean, max) = endpoint_error(&est, &zero).unwrap();
        assert!((mean - 5.0).abs() < 1e-12);
        assert!((max - 5.0).abs() < 1e-12);

        let mut f = DenseField::zeros(dims);
        let mut g = DenseField::zeros(dims);
        for (i, (df, dg)) in f.data.iter_mut().zip(&mut g.data).enumerate() {
            *df = [
                hash_unit(84, i as u64),
                hash_unit(85, i as u64),
                hash_unit(86, i as u64),
            ];
            *dg = [
                hash_unit(87, i as u64),
                hash_unit(88, i as u64),
                hash_unit(89, i as u64),
            ];
        }
        let (mean, max) = endpoint_error(&f, &g).unwrap();
        let mut want_mean = 0f64;
        let mut want_max = 0f64;
        for (df, dg) in f.data.iter().zip(&g.data) {
            let e = norm3(sub3(*df, *dg));
            want_mean += e;
            want_max = want_max.max(e);
        }
        want_mean /= f.data.len() as f64;
        assert!((mean - want_mean).abs() < 1e-12);
        assert_eq!(max, want_max);
    }

    #[test]
    fn endpoint_error_triangle_inequality_on_means() {
        let dims = [8, 8, 8];
        let make = |seed: u64| {
            let mut f = DenseField::zeros(dims);
            for (i, d) in f.data.iter_mut().enumerate() {
                *d = [
                    hash_unit(seed, i as u64) * 2.0,
                    hash_unit(seed + 1, i as u64) * 2.0,
                    hash_unit(seed + 2, i as u64) * 2.0,
                ];
            }
            f
        };
        let f = make(90);
        let g = make(93);
        let h = make(96);
        let (fh, _) = endpoint_error(&f, &h).unwrap();
        let (fg, _) = endpoint_error(&f, &g).unwrap();
        let (gh, _) = endpoint_error(&g, &h).unwrap();
        assert!(fh <= fg + gh + 1e-9);
    }
}
