//! Counter-based deterministic randomness.
//!
//! A value is a hash of the seed, a stream key `(purpose, step, layer, lane)`
//! and a counter, so any stream can be reopened anywhere and replays the
//! same sequence. Partitioning uses lane 0 for every batch element when the
//! batch shares its randomness.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Partition = 1,
    Weights = 2,
    Noise = 3,
    Prompt = 4,
    Demo = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rng {
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Purpose, step: u64, layer: u64) -> Stream {
        self.lane_stream(purpose, step, layer, 0)
    }

    pub fn lane_stream(&self, purpose: Purpose, step: u64, layer: u64, lane: u64) -> Stream {
        let mut key = mix(self.seed.wrapping_add(GOLDEN));
        for part in [purpose as u64, step, layer, lane] {
            key = mix(key ^ part.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019));
        }
        Stream { key, counter: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal sample (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// First `k` entries of a uniform random permutation of `0..n`.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_sequence() {
        let rng = Rng::new(42);
        let a: Vec<u64> = {
            let mut s = rng.stream(Purpose::Partition, 3, 7);
            (0..16).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = Rng::new(42).stream(Purpose::Partition, 3, 7);
            (0..16).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn keys_separate_streams() {
        let rng = Rng::new(1);
        let first = |mut s: Stream| s.next_u64();
        let base = first(rng.stream(Purpose::Partition, 0, 0));
        assert_ne!(base, first(rng.stream(Purpose::Partition, 1, 0)));
        assert_ne!(base, first(rng.stream(Purpose::Partition, 0, 1)));
        assert_ne!(base, first(rng.stream(Purpose::Weights, 0, 0)));
        assert_ne!(base, first(rng.lane_stream(Purpose::Partition, 0, 0, 1)));
        assert_ne!(base, first(Rng::new(2).stream(Purpose::Partition, 0, 0)));
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut s = Rng::new(9).stream(Purpose::Demo, 0, 0);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[s.below(4)] += 1;
        }
        for c in counts {
            assert!((9_500..10_500).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut s = Rng::new(5).stream(Purpose::Weights, 0, 0);
        let xs: Vec<f64> = (0..50_000).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn sample_without_replacement_is_distinct() {
        let mut s = Rng::new(3).stream(Purpose::Partition, 0, 0);
        let mut picked = s.sample_without_replacement(20, 20);
        picked.sort_unstable();
        assert_eq!(picked, (0..20).collect::<Vec<_>>());
    }
}
