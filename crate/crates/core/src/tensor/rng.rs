use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::tensor::Tensor;

/// Seeded xoshiro256** stream. `(seed, stream)` fully determines the draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: Xoshiro256StarStar,
    spare_normal: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = if stream == 0 {
            seed
        } else {
            seed ^ splitmix64(stream)
        };
        Self {
            seed,
            stream,
            inner: Xoshiro256StarStar::seed_from_u64(key),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream; same parent and id always give the same child.
    pub fn derive(&self, id: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(self.stream)), id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller; the second variate of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n) by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Fisher–Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// rows×cols tensor of N(0, std²) entries.
    pub fn normal_tensor(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Tensor::matrix(rows, cols, data).expect("positive dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrawKind {
    Uniform,
    Normal,
    Permutation,
}

/// Draw `n` samples of the given kind; permutations are returned as indices in f64.
pub fn rng_draw(stream: &mut RngStream, kind: DrawKind, n: usize) -> Vec<f64> {
    match kind {
        DrawKind::Uniform => stream.uniforms(n),
        DrawKind::Normal => stream.normals(n),
        DrawKind::Permutation => stream.permutation(n).into_iter().map(|i| i as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_repeats() {
        let a = rng_draw(&mut RngStream::new(42, 3), DrawKind::Uniform, 100);
        let b = rng_draw(&mut RngStream::new(42, 3), DrawKind::Uniform, 100);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_diverge_immediately() {
        let mut s0 = RngStream::new(7, 0);
        let mut s1 = RngStream::new(7, 1);
        let a: Vec<u64> = (0..4).map(|_| s0.next_u64()).collect();
        let b: Vec<u64> = (0..4).map(|_| s1.next_u64()).collect();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn stream_zero_matches_splitmix_seeding() {
        // xoshiro256** seeded through splitmix64 with seed 0: first output
        // of the reference C implementation.
        let mut s = RngStream::new(0, 0);
        let mut reference = Xoshiro256StarStar::seed_from_u64(0);
        assert_eq!(s.next_u64(), reference.next_u64());
    }

    #[test]
    fn uniform_range_is_half_open() {
        let mut s = RngStream::new(1, 0);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let xs = rng_draw(&mut RngStream::new(2024, 0), DrawKind::Normal, 100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn permutation_is_bijection() {
        let mut p = RngStream::new(9, 0).permutation(257);
        p.sort_unstable();
        assert_eq!(p, (0..257).collect::<Vec<_>>());
    }
}
