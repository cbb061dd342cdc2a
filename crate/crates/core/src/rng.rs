//! Seeded random streams keyed by `(sample, epoch)`.
//!
//! Every stochastic decision in training (the per-image Bernoulli draw, the
//! dynamic-moderation noise, the per-epoch shuffle) comes from a stream whose
//! identity is fixed by the run seed plus a key. Streams never depend on the
//! order in which they are created, so data loading can be parallel without
//! changing any draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_domain, Result};

/// Identifies one substream under a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub sample: u64,
    pub epoch: u64,
}

impl StreamKey {
    pub const fn new(sample: u64, epoch: u64) -> Self {
        Self { sample, epoch }
    }
}

// Reserved sample indices for streams that are not tied to a training image.
pub(crate) const SHUFFLE_STREAM: u64 = u64::MAX;
pub(crate) const INIT_STREAM: u64 = u64::MAX - 1;

// Distinguishes seeding domains so that a dataset seed and a training seed
// with equal values still give unrelated streams.
const DOMAIN_TAG: u64 = 0x4153_4c50_5354_524d; // "ASLPSTRM"

#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    key: StreamKey,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let mut material = [0u8; 32];
        material[0..8].copy_from_slice(&seed.to_le_bytes());
        material[8..16].copy_from_slice(&key.sample.to_le_bytes());
        material[16..24].copy_from_slice(&key.epoch.to_le_bytes());
        material[24..32].copy_from_slice(&DOMAIN_TAG.to_le_bytes());
        Self {
            seed,
            key,
            rng: ChaCha8Rng::from_seed(material),
        }
    }

    pub fn for_sample(seed: u64, sample: u64, epoch: u64) -> Self {
        Self::new(seed, StreamKey::new(sample, epoch))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Returns `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        ensure_domain((0.0..=1.0).contains(&p), || {
            format!("Bernoulli probability must lie in [0, 1], got {p}")
        })?;
        // The stream advances even for degenerate p so that a run's later draws
        // do not shift when a probability hits 0 or 1.
        let u = self.uniform();
        Ok(u < p)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal(&mut self, mu: f64, sigma: f64) -> f64 {
        mu + sigma * self.standard_normal()
    }

    /// Draw from `N(mu, sigma)` conditioned on `[a, b]` by rejection.
    pub fn truncated_normal(&mut self, a: f64, b: f64, mu: f64, sigma: f64) -> Result<f64> {
        ensure_domain(a < b, || format!("truncation bounds need a < b, got [{a}, {b}]"))?;
        ensure_domain(sigma > 0.0 && sigma.is_finite(), || {
            format!("sigma must be positive, got {sigma}")
        })?;
        // With bounds many sigmas away from the mean the acceptance rate
        // collapses; fall back to a uniform proposal weighted by the density.
        let lo = (a - mu) / sigma;
        let hi = (b - mu) / sigma;
        if lo > 4.0 || hi < -4.0 {
            let peak = if lo > 0.0 { lo } else { hi };
            loop {
                let x = lo + (hi - lo) * self.uniform();
                let accept = (-(x * x - peak * peak) / 2.0).exp();
                if self.uniform() < accept {
                    return Ok(mu + sigma * x);
                }
            }
        }
        loop {
            let x = self.normal(mu, sigma);
            if (a..=b).contains(&x) {
                return Ok(x);
            }
        }
    }

    /// Integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(seed: u64) -> RandomSource {
        RandomSource::for_sample(seed, 3, 7)
    }

    #[test]
    fn degenerate_bernoulli() {
        let mut s = src(1);
        for _ in 0..1000 {
            assert!(!s.bernoulli(0.0).unwrap());
            assert!(s.bernoulli(1.0).unwrap());
        }
    }

    #[test]
    fn bernoulli_rejects_out_of_range() {
        let mut s = src(1);
        assert!(s.bernoulli(-0.01).is_err());
        assert!(s.bernoulli(1.01).is_err());
        assert!(s.bernoulli(f64::NAN).is_err());
    }

    #[test]
    fn bernoulli_frequency() {
        let mut s = src(2);
        let n = 1_000_000;
        let hits = (0..n).filter(|_| s.bernoulli(0.3).unwrap()).count();
        let mean = hits as f64 / n as f64;
        assert!((mean - 0.3).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn per_epoch_bernoulli_frequency_within_four_sigma() {
        // One draw per epoch for a single sample, as the trainer does.
        let p = 0.3;
        let epochs = 100_000u64;
        let hits = (0..epochs)
            .filter(|&e| RandomSource::for_sample(11, 42, e).bernoulli(p).unwrap())
            .count();
        let mean = hits as f64 / epochs as f64;
        let sigma = (p * (1.0 - p) / epochs as f64).sqrt();
        assert!((mean - p).abs() < 4.0 * sigma, "mean {mean}");
    }

    #[test]
    fn uniform_range_mean_and_determinism() {
        let mut a = src(5);
        let mut b = src(5);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = a.uniform();
            assert!((0.0..1.0).contains(&u));
            assert_eq!(u.to_bits(), b.uniform().to_bits());
            sum += u;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.001);
    }

    #[test]
    fn distinct_keys_give_distinct_streams() {
        let draw = |k: StreamKey| {
            let mut s = RandomSource::new(9, k);
            (0..8).map(|_| s.uniform()).collect::<Vec<_>>()
        };
        let base = draw(StreamKey::new(0, 0));
        assert_ne!(base, draw(StreamKey::new(1, 0)));
        assert_ne!(base, draw(StreamKey::new(0, 1)));
        assert_ne!(draw(StreamKey::new(1, 0)), draw(StreamKey::new(0, 1)));
        let mut other_seed = RandomSource::new(10, StreamKey::new(0, 0));
        assert_ne!(base[0], other_seed.uniform());
    }

    #[test]
    fn streams_do_not_depend_on_creation_order_or_thread() {
        let collect = |k: u64| {
            let mut s = RandomSource::for_sample(77, k, 3);
            (0..16).map(|_| s.uniform().to_bits()).collect::<Vec<_>>()
        };
        let serial: Vec<_> = (0..8).map(collect).collect();
        let handles: Vec<_> = (0..8u64)
            .rev()
            .map(|k| std::thread::spawn(move || (k, collect(k))))
            .collect();
        for h in handles {
            let (k, v) = h.join().unwrap();
            assert_eq!(v, serial[k as usize]);
        }
    }

    #[test]
    fn truncated_normal_support() {
        let mut s = src(3);
        for _ in 0..100_000 {
            let x = s.truncated_normal(-0.5, 0.5, 0.0, 1.0).unwrap();
            assert!((-0.5..=0.5).contains(&x));
        }
        assert!(s.truncated_normal(0.5, 0.5, 0.0, 1.0).is_err());
        assert!(s.truncated_normal(0.6, 0.5, 0.0, 1.0).is_err());
        assert!(s.truncated_normal(-0.5, 0.5, 0.0, 0.0).is_err());
    }

    /// Second moment of N(0,1) truncated to [a, b] by composite Simpson
    /// quadrature of the unnormalised density.
    fn truncated_variance_by_quadrature(a: f64, b: f64) -> f64 {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let pdf = |x: f64| (-x * x / 2.0).exp();
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            z += w * pdf(x);
            m1 += w * x * pdf(x);
            m2 += w * x * x * pdf(x);
        }
        let mean = m1 / z;
        m2 / z - mean * mean
    }

    #[test]
    fn truncated_normal_moments() {
        let oracle = truncated_variance_by_quadrature(-0.5, 0.5);
        // Closed form: 1 - 2*0.5*phi(0.5)/(Phi(0.5)-Phi(-0.5)) = 0.080589...
        assert!((oracle - 0.080_589).abs() < 1e-5, "oracle {oracle}");
        assert!((oracle - 0.0796).abs() < 0.002);

        let mut s = src(4);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| s.truncated_normal(-0.5, 0.5, 0.0, 1.0).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.001, "mean {mean}");
        assert!((var - oracle).abs() < 0.002, "var {var}");
    }

    #[test]
    fn truncated_normal_far_tail() {
        let mut s = src(8);
        for _ in 0..1000 {
            let x = s.truncated_normal(6.0, 7.0, 0.0, 1.0).unwrap();
            assert!((6.0..=7.0).contains(&x));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        src(6).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
