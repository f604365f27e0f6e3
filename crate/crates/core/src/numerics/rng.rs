use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Deterministic ChaCha20 stream addressed by `(seed, substream path)`.
///
/// Substreams are derived from the parent's path, not from its current
/// position, so drawing from a parent never perturbs its children.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    path: String,
    inner: ChaCha20Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, String::new())
    }

    fn at(seed: u64, path: String) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(path.as_bytes()));
        SeededRng { seed, path, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn substream(&self, name: &str) -> SeededRng {
        Self::at(self.seed, format!("{}/{}", self.path, name))
    }

    pub fn substream_indexed(&self, name: &str, index: usize) -> SeededRng {
        self.substream(&format!("{name}#{index}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// Gamma(shape, scale) via Marsaglia–Tsang; shapes below one use the
    /// `U^(1/k)` boost from shape `k + 1`.
    pub fn gamma(&mut self, shape: f64, scale: f64) -> Result<f64> {
        if !(shape > 0.0 && shape.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma parameters must be positive, got shape {shape}, scale {scale}"
            )));
        }
        if shape < 1.0 {
            let boosted = self.gamma(shape + 1.0, scale)?;
            let u = self.uniform_open();
            return Ok(boosted * u.powf(1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return Ok(d * v * scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn gamma_moments() {
        let mut rng = SeededRng::new(11).substream("gamma");
        let xs: Vec<f64> = (0..100_000).map(|_| rng.gamma(2.0, 75.0).unwrap()).collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        let (mean, var) = moments(&xs);
        assert!((mean - 150.0).abs() < 2.0, "mean {mean}");
        assert!((var - 11_250.0).abs() < 0.05 * 11_250.0, "var {var}");
    }

    #[test]
    fn gamma_small_shape_boost() {
        let mut rng = SeededRng::new(3);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.gamma(0.5, 2.0).unwrap()).collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        let (mean, var) = moments(&xs);
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
        assert!((var - 2.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn gamma_rejects_bad_parameters() {
        let mut rng = SeededRng::new(0);
        assert!(rng.gamma(0.0, 1.0).is_err());
        assert!(rng.gamma(1.0, -1.0).is_err());
        assert!(rng.gamma(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(42).substream("x");
        let mut b = SeededRng::new(42).substream("x");
        let sa: Vec<u64> = (0..64).map(|_| a.gamma(2.0, 75.0).unwrap().to_bits()).collect();
        let sb: Vec<u64> = (0..64).map(|_| b.gamma(2.0, 75.0).unwrap().to_bits()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn substreams_are_independent_of_parent_position() {
        let mut parent = SeededRng::new(5);
        let before = parent.substream("child").next_u64();
        parent.next_u64();
        let after = parent.substream("child").next_u64();
        assert_eq!(before, after);
        assert_ne!(parent.substream("a").next_u64(), parent.substream("b").next_u64());
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut rng = SeededRng::new(9);
        let mut idx = rng.sample_indices(20, 12);
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 12);
        assert!(idx.iter().all(|&i| i < 20));
    }
}
