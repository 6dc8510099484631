//! Deterministic synthetic test data: textured volumes built from Gaussian
//! blobs, label masks at the blob cores, known smooth ground-truth
//! deformations, and intensity remaps that fake a second modality.
//!
//! Everything derives from counter-based hashing of the spec seed, so the
//! same spec reproduces bit-identical outputs at any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::propagate_labels;
use crate::transform::{warp, DenseField};
use crate::util::{hash_normal, hash_unit};
use crate::volume::{rescale_intensity, voxel_count, Interp, LabelVolume, Volume};
use crate::DEFAULT_SEED;

/// Noise level as a fraction of the clean intensity range.
const NOISE_FRACTION: f32 = 0.02;
/// A blob voxel joins the label core when its own Gaussian exceeds this.
const CORE_THRESHOLD: f32 = 0.55;

/// Ground-truth deformation family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Deformation {
    None,
    /// Axis-cycled sinusoid; peak displacement norm equals `amplitude`.
    Sinusoidal { amplitude: f64, period: f64 },
    /// Smoothed per-voxel noise rescaled to `amplitude` peak norm.
    RandomSmooth { amplitude: f64, sigma: f64 },
}

/// Intensity remap applied to the second volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Remap {
    Identity,
    /// normalized(v)^g; monotone but nonlinear.
    Gamma(f64),
    /// Splits [0,1] into n bands and reverses intensity inside every odd
    /// band; non-monotone, defeats plain correlation.
    InvertedBands(usize),
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub n_blobs: usize,
    pub deformation: Deformation,
    pub remap: Remap,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            seed: DEFAULT_SEED,
            n_blobs: 6,
            deformation: Deformation::None,
            remap: Remap::Identity,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::invalid("phantom dims must be at least 8 per axis"));
        }
        if self.n_blobs == 0 {
            return Err(Error::invalid("phantom needs at least one blob"));
        }
        match self.deformation {
            Deformation::None => {}
            Deformation::Sinusoidal { amplitude, period } => {
                if !(amplitude >= 0.0 && period > 0.0) {
                    return Err(Error::invalid("sinusoidal deformation needs amplitude >= 0, period > 0"));
                }
                if amplitude >= period / 4.0 {
                    return Err(Error::invalid(format!(
                        "amplitude {amplitude} breaks the invertibility bound (must be < period/4 = {})",
                        period / 4.0
                    )));
                }
            }
            Deformation::RandomSmooth { amplitude, sigma } => {
                if !(amplitude >= 0.0 && sigma > 0.0) {
                    return Err(Error::invalid("random deformation needs amplitude >= 0, sigma > 0"));
                }
                if amplitude >= sigma {
                    return Err(Error::invalid(format!(
                        "amplitude {amplitude} breaks the invertibility bound (must be < sigma = {sigma})"
                    )));
                }
            }
        }
        if let Remap::InvertedBands(n) = self.remap {
            if n == 0 {
                return Err(Error::invalid("inverted_bands needs at least one band"));
            }
        }
        if let Remap::Gamma(g) = self.remap {
            if g <= 0.0 {
                return Err(Error::invalid("gamma must be positive"));
            }
        }
        Ok(())
    }

    /// Human-readable echo, sufficient to reproduce the phantom.
    pub fn echo(&self) -> String {
        let deformation = match self.deformation {
            Deformation::None => "none".to_string(),
            Deformation::Sinusoidal { amplitude, period } => {
                format!("sinusoidal:{amplitude},{period}")
            }
            Deformation::RandomSmooth { amplitude, sigma } => {
                format!("random:{amplitude},{sigma}")
            }
        };
        let remap = match self.remap {
            Remap::Identity => "identity".to_string(),
            Remap::Gamma(g) => format!("gamma:{g}"),
            Remap::InvertedBands(n) => format!("bands:{n}"),
        };
        format!(
            "dims={}x{}x{}\nseed={:#x}\nn_blobs={}\ndeformation={}\nremap={}\n",
            self.dims[0], self.dims[1], self.dims[2], self.seed, self.n_blobs, deformation, remap
        )
    }
}

/// Generated pair: `volume_b` is `volume_a` pushed through the truth field
/// and remapped, so registering B (fixed) against A (moving) should recover
/// `truth`.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume_a: Volume,
    pub volume_b: Volume,
    pub labels_a: LabelVolume,
    pub labels_b: LabelVolume,
    pub truth: DenseField,
}

struct Blob {
    center: [f64; 3],
    radius: f64,
    amplitude: f64,
}

fn make_blobs(spec: &PhantomSpec) -> Vec<Blob> {
    let min_dim = *spec.dims.iter().min().unwrap() as f64;
    (0..spec.n_blobs)
        .map(|k| {
            let k = k as u64;
            let u = |salt: u64| hash_unit(spec.seed ^ salt, k);
            Blob {
                center: [
                    (0.2 + 0.6 * u(0xB0B_1)) * (spec.dims[0] - 1) as f64,
                    (0.2 + 0.6 * u(0xB0B_2)) * (spec.dims[1] - 1) as f64,
                    (0.2 + 0.6 * u(0xB0B_3)) * (spec.dims[2] - 1) as f64,
                ],
                radius: (0.06 + 0.08 * u(0xB0B_4)) * min_dim,
                amplitude: 0.6 + 0.4 * u(0xB0B_5),
            }
        })
        .collect()
}

fn truth_field(spec: &PhantomSpec) -> DenseField {
    let dims = spec.dims;
    match spec.deformation {
        Deformation::None => DenseField::zeros(dims),
        Deformation::Sinusoidal { amplitude, period } => {
            let mut f = DenseField::zeros(dims);
            let k = 2.0 * std::f64::consts::PI / period;
            let a = amplitude / 3f64.sqrt();
            f.data.par_iter_mut().enumerate().for_each(|(idx, d)| {
                let x = (idx % dims[0]) as f64;
                let y = ((idx / dims[0]) % dims[1]) as f64;
                let z = (idx / (dims[0] * dims[1])) as f64;
                *d = [a * (k * y).sin(), a * (k * z).sin(), a * (k * x).sin()];
            });
            f
        }
        Deformation::RandomSmooth { amplitude, sigma } => {
            // Seeded white noise per component, smoothed separably, then
            // rescaled so the largest norm equals `amplitude`.
            let n = voxel_count(dims);
            let taps = crate::volume::gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
            let channels: Vec<Vec<f32>> = (0..3u64)
                .map(|c| {
                    let data: Vec<f32> = (0..n)
                        .map(|i| hash_normal(spec.seed ^ (0xF1E1D << 4 | c), i as u64) as f32)
                        .collect();
                    crate::volume::smooth_separable(dims, &data, &taps)
                })
                .collect();
            let mut f = DenseField::zeros(dims);
            f.data.par_iter_mut().enumerate().for_each(|(i, d)| {
                *d = [
                    channels[0][i] as f64,
                    channels[1][i] as f64,
                    channels[2][i] as f64,
                ];
            });
            let peak = f.max_norm();
            if peak > 0.0 {
                let s = amplitude / peak;
                f.data.par_iter_mut().for_each(|d| {
                    d[0] *= s;
                    d[1] *= s;
                    d[2] *= s;
                });
            }
            f
        }
    }
}

fn apply_remap(v: &Volume, remap: Remap) -> Volume {
    match remap {
        Remap::Identity => v.clone(),
        Remap::Gamma(g) => {
            let mut out = rescale_intensity(v, 0.0, 1.0);
            out.data
                .par_iter_mut()
                .for_each(|x| *x = (*x as f64).powf(g) as f32);
            out
        }
        Remap::InvertedBands(n) => {
            let mut out = rescale_intensity(v, 0.0, 1.0);
            let nf = n as f32;
            out.data.par_iter_mut().for_each(|x| {
                let band = ((*x * nf).floor() as usize).min(n - 1);
                if band % 2 == 1 {
                    let lo = band as f32 / nf;
                    let hi = (band + 1) as f32 / nf;
                    *x = hi - (*x - lo);
                }
            });
            out
        }
    }
}

/// Builds the phantom pair, labels, and ground-truth field for a spec.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let n = voxel_count(dims);
    let blobs = make_blobs(spec);

    // Clean texture: blobs over a smooth ramp.
    let mut clean = vec![0f32; n];
    clean.par_iter_mut().enumerate().for_each(|(idx, v)| {
        let x = (idx % dims[0]) as f64;
        let y = ((idx / dims[0]) % dims[1]) as f64;
        let z = (idx / (dims[0] * dims[1])) as f64;
        let mut acc = 0.3
            * (x / (dims[0] - 1) as f64 + 0.5 * y / (dims[1] - 1) as f64
                - 0.25 * z / (dims[2] - 1) as f64);
        for b in &blobs {
            let r2 = (x - b.center[0]).powi(2)
                + (y - b.center[1]).powi(2)
                + (z - b.center[2]).powi(2);
            acc += b.amplitude * (-r2 / (2.0 * b.radius * b.radius)).exp();
        }
        *v = acc as f32;
    });
    let (lo, hi) = clean
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;

    // Labels from the strongest blob core per voxel, before noise.
    let mut labels = vec![0u32; n];
    labels.par_iter_mut().enumerate().for_each(|(idx, l)| {
        let x = (idx % dims[0]) as f64;
        let y = ((idx / dims[0]) % dims[1]) as f64;
        let z = (idx / (dims[0] * dims[1])) as f64;
        let mut best = 0f64;
        let mut best_label = 0u32;
        for (k, b) in blobs.iter().enumerate() {
            let r2 = (x - b.center[0]).powi(2)
                + (y - b.center[1]).powi(2)
                + (z - b.center[2]).powi(2);
            let core = (-r2 / (2.0 * b.radius * b.radius)).exp();
            if core > best {
                best = core;
                best_label = k as u32 + 1;
            }
        }
        *l = if best > CORE_THRESHOLD as f64 {
            best_label
        } else {
            0
        };
    });

    // Seeded noise, then rescale to [0, 1].
    let mut raw = clean;
    raw.par_iter_mut().enumerate().for_each(|(idx, v)| {
        *v += NOISE_FRACTION * range * hash_normal(spec.seed ^ 0x0A15E, idx as u64) as f32;
    });
    let volume_a = rescale_intensity(&Volume::new(dims, [1.0; 3], raw)?, 0.0, 1.0);
    let labels_a = LabelVolume::new(dims, [1.0; 3], labels)?;

    let truth = truth_field(spec);
    let warped = warp(&volume_a, &truth, Interp::Trilinear)?;
    let volume_b = apply_remap(&warped, spec.remap);
    let labels_b = propagate_labels(&labels_a, &truth)?;

    Ok(Phantom {
        volume_a,
        volume_b,
        labels_a,
        labels_b,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dice;
    use crate::transform::{compose, invert, DEFAULT_INVERT_ITERS, DEFAULT_INVERT_TOL};

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec {
            dims: [24, 24, 24],
            deformation: Deformation::Sinusoidal {
                amplitude: 2.0,
                period: 16.0,
            },
            remap: Remap::Gamma(1.5),
            ..Default::default()
        };
        let p1 = generate(&spec).unwrap();
        let p2 = generate(&spec).unwrap();
        assert_eq!(p1.volume_a.data, p2.volume_a.data);
        assert_eq!(p1.volume_b.data, p2.volume_b.data);
        assert_eq!(p1.labels_a.data, p2.labels_a.data);
        assert_eq!(p1.truth.data, p2.truth.data);

        let other = generate(&PhantomSpec { seed: 7, ..spec }).unwrap();
        assert_ne!(p1.volume_a.data, other.volume_a.data);
    }

    #[test]
    fn no_deformation_identity_remap_gives_equal_pair() {
        let spec = PhantomSpec {
            dims: [20, 20, 20],
            ..Default::default()
        };
        let p = generate(&spec).unwrap();
        assert_eq!(p.volume_a.data, p.volume_b.data);
        assert_eq!(p.labels_a.data, p.labels_b.data);
        assert_eq!(p.truth.max_norm(), 0.0);
        assert!(p.labels_a.data.iter().any(|&l| l > 0));
    }

    #[test]
    fn gamma_remap_squares_normalized_intensities() {
        let spec = PhantomSpec {
            dims: [16, 16, 16],
            remap: Remap::Gamma(2.0),
            ..Default::default()
        };
        let p = generate(&spec).unwrap();
        // volume_a is already [0,1]-normalized, so B = A².
        for (b, a) in p.volume_b.data.iter().zip(&p.volume_a.data) {
            assert!((b - a * a).abs() < 1e-6, "{b} vs {}", a * a);
        }
        assert_eq!(p.labels_a.data, p.labels_b.data);
    }

    #[test]
    fn inverted_bands_reverses_odd_bands() {
        let v = Volume::new([8, 8, 8], [1.0; 3], (0..512).map(|i| i as f32 / 511.0).collect())
            .unwrap();
        let out = apply_remap(&v, Remap::InvertedBands(4));
        for (x, y) in v.data.iter().zip(&out.data) {
            let band = ((x * 4.0).floor() as usize).min(3);
            if band % 2 == 0 {
                assert_eq!(x, y);
            } else {
                let lo = band as f32 / 4.0;
                let hi = (band + 1) as f32 / 4.0;
                assert!((y - (hi - (x - lo))).abs() < 1e-6);
                // Still inside the band.
                assert!(*y >= lo - 1e-6 && *y <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn sinusoidal_truth_hits_exact_peak_norm_and_inverts() {
        let spec = PhantomSpec {
            dims: [64, 64, 64],
            deformation: Deformation::Sinusoidal {
                amplitude: 3.0,
                period: 32.0,
            },
            ..Default::default()
        };
        let p = generate(&spec).unwrap();
        assert!((p.truth.max_norm() - 3.0).abs() < 1e-6, "{}", p.truth.max_norm());
        let (inv, report) = invert(&p.truth, DEFAULT_INVERT_ITERS, DEFAULT_INVERT_TOL);
        assert!(report.converged, "residual {}", report.residual);
        let round = compose(&p.truth, &inv).unwrap();
        assert!(round.max_norm() < 0.1, "round-trip {}", round.max_norm());
    }

    #[test]
    fn random_smooth_truth_respects_amplitude_and_inverts() {
        let spec = PhantomSpec {
            dims: [32, 32, 32],
            deformation: Deformation::RandomSmooth {
                amplitude: 2.0,
                sigma: 4.0,
            },
            ..Default::default()
        };
        let p = generate(&spec).unwrap();
        assert!((p.truth.max_norm() - 2.0).abs() < 1e-9);
        let (inv, _) = invert(&p.truth, DEFAULT_INVERT_ITERS, DEFAULT_INVERT_TOL);
        let round = compose(&p.truth, &inv).unwrap();
        assert!(round.max_norm() < 0.1, "round-trip {}", round.max_norm());
    }

    #[test]
    fn default_spec_initial_dice_sits_in_the_expected_band() {
        let spec = PhantomSpec {
            deformation: Deformation::Sinusoidal {
                amplitude: 3.0,
                period: 32.0,
            },
            ..Default::default()
        };
        let p = generate(&spec).unwrap();
        let r = dice(&p.labels_a, &p.labels_b).unwrap();
        assert!(
            (0.4..=0.8).contains(&r.mean),
            "initial mean Dice {} outside [0.4, 0.8]",
            r.mean
        );
    }

    #[test]
    fn invertibility_bound_is_enforced() {
        let spec = PhantomSpec {
            deformation: Deformation::Sinusoidal {
                amplitude: 9.0,
                period: 32.0,
            },
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
        let spec = PhantomSpec {
            deformation: Deformation::RandomSmooth {
                amplitude: 5.0,
                sigma: 4.0,
            },
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
    }
}
