//! Small numeric helpers shared across modules.

use rayon::prelude::*;

/// Chunk length for parallel reductions. Fixed so the summation tree, and
/// therefore the floating-point result, never depends on the thread count.
pub const REDUCE_CHUNK: usize = 4096;

/// Sums `f(i)` for `i in 0..n` with a thread-count-independent result:
/// fixed-size chunks are reduced in parallel, then folded in index order.
pub fn deterministic_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks: Vec<f64> = (0..n)
        .into_par_iter()
        .chunks(REDUCE_CHUNK)
        .map(|chunk| chunk.into_iter().map(&f).sum::<f64>())
        .collect();
    chunks.iter().sum()
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// SplitMix64 finalizer. Used as a counter-based generator: hashing
/// `(seed, counter)` gives reproducible per-voxel randomness regardless of
/// iteration order or thread count.
pub fn hash64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Uniform in [0, 1) from a hash counter.
pub fn hash_unit(seed: u64, counter: u64) -> f64 {
    let h = hash64(seed ^ hash64(counter));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal via Box-Muller on two counter-hashed uniforms.
pub fn hash_normal(seed: u64, counter: u64) -> f64 {
    let u1 = hash_unit(seed, counter.wrapping_mul(2)).max(1e-300);
    let u2 = hash_unit(seed, counter.wrapping_mul(2).wrapping_add(1));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Interpolated percentile (linear between order statistics), `p` in [0, 100].
pub fn percentile(sorted: &[f32], p: f64) -> f32 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_sum_matches_serial() {
        let n = 100_000;
        let serial: f64 = (0..n)
            .collect::<Vec<_>>()
            .chunks(REDUCE_CHUNK)
            .map(|c| c.iter().map(|&i| (i as f64).sin()).sum::<f64>())
            .sum();
        let par = deterministic_sum(n, |i| (i as f64).sin());
        assert_eq!(serial, par);
    }

    #[test]
    fn deterministic_sum_independent_of_thread_count() {
        let n = 50_000;
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| deterministic_sum(n, |i| 1.0 / (1.0 + i as f64)))
        };
        assert_eq!(run(1).to_bits(), run(8).to_bits());
    }

    #[test]
    fn percentile_endpoints_and_interior() {
        let v: Vec<f32> = (0..101).map(|i| i as f32).collect();
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert!((percentile(&v, 0.5) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn hash_normal_is_roughly_standard() {
        let n = 20_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for i in 0..n {
            let z = hash_normal(7, i);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
