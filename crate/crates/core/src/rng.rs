//! Counter-based deterministic random number generation.
//!
//! Every random decision in a run is drawn from a [`StreamRng`], a keyed
//! counter generator: the i-th output is a pure function of `(key, i)`.
//! Streams are derived by name (and optionally by index) from a single run
//! seed, so workers can draw independently without perturbing each other's
//! sequences, and any stream can be reconstructed from `(seed, labels)` alone.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A named, counter-based generator stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        StreamRng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Derive an independent child stream by label. Derivation depends only on
    /// the parent key, not on how many values the parent has produced.
    pub fn stream(&self, label: &str) -> StreamRng {
        StreamRng {
            key: mix(self.key ^ fnv1a(label.as_bytes())),
            counter: 0,
        }
    }

    /// Derive an independent child stream by index (e.g. one per round).
    pub fn substream(&self, index: u64) -> StreamRng {
        StreamRng {
            key: mix(self.key ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN))),
            counter: 0,
        }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        StreamRng { key, counter }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform integer in [0, n) via Lemire's widening multiply.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    #[inline]
    pub fn byte(&mut self) -> u8 {
        (self.next_u64() >> 56) as u8
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Standard normal via Box-Muller. Two uniforms per draw; nothing cached,
    /// so the stream state stays a bare counter.
    pub fn normal(&mut self) -> f32 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    /// Gamma(alpha, 1) via Marsaglia-Tsang, with the boost trick for alpha < 1.
    pub fn gamma(&mut self, alpha: f64) -> f64 {
        assert!(alpha > 0.0, "gamma requires alpha > 0");
        if alpha < 1.0 {
            let boost = self.gamma(alpha + 1.0);
            let u = loop {
                let u = self.next_f64();
                if u > 0.0 {
                    break u;
                }
            };
            return boost * u.powf(1.0 / alpha);
        }
        let d = alpha - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = f64::from(self.normal());
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_f64();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Dirichlet(alpha) over `dim` categories.
    pub fn dirichlet(&mut self, alpha: f64, dim: usize) -> Vec<f64> {
        let mut out: Vec<f64> = (0..dim).map(|_| self.gamma(alpha)).collect();
        let sum: f64 = out.iter().sum();
        if sum <= 0.0 {
            // All gammas underflowed (possible for tiny alpha); fall back to a
            // point mass on a uniformly chosen category.
            let hot = self.below(dim as u64) as usize;
            out.iter_mut().for_each(|v| *v = 0.0);
            out[hot] = 1.0;
            return out;
        }
        out.iter_mut().for_each(|v| *v /= sum);
        out
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from 0..n (partial Fisher-Yates).
    pub fn distinct(&mut self, k: usize, n: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Sample an index from an unnormalized non-negative weight vector.
    pub fn categorical(&mut self, weights: &[f32]) -> usize {
        let total: f64 = weights.iter().map(|&w| f64::from(w)).sum();
        let mut dart = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= f64::from(w);
            if dart <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_independent() {
        let root = StreamRng::new(7);
        let mut a1 = root.stream("alpha");
        let mut a2 = root.stream("alpha");
        let mut b = root.stream("beta");
        let xs: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().zip((0..8).map(|_| b.next_u64())).any(|(x, y)| *x != y));
    }

    #[test]
    fn counter_state_round_trips() {
        let mut r = StreamRng::new(99).stream("s");
        for _ in 0..13 {
            r.next_u64();
        }
        let (k, c) = r.state();
        let mut r2 = StreamRng::from_state(k, c);
        assert_eq!(r.next_u64(), r2.next_u64());
    }

    #[test]
    fn uniform_bytes_pass_chi_squared() {
        let mut r = StreamRng::new(3).stream("bytes");
        let n = 1_000_000usize;
        let mut counts = [0u64; 256];
        for _ in 0..n {
            counts[r.byte() as usize] += 1;
        }
        let expected = n as f64 / 256.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-squared critical value, 255 dof, p = 0.001 (Wilson-Hilferty).
        assert!(stat < 330.5, "chi-squared stat {stat} too large");
    }

    #[test]
    fn normal_moments() {
        let mut r = StreamRng::new(11).stream("normal");
        let n = 200_000;
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let x = f64::from(r.normal());
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn gamma_mean_matches_alpha() {
        for &alpha in &[0.5f64, 1.0, 2.5] {
            let mut r = StreamRng::new(5).stream("gamma");
            let n = 100_000;
            let mean: f64 = (0..n).map(|_| r.gamma(alpha)).sum::<f64>() / n as f64;
            assert!((mean - alpha).abs() < 0.03, "alpha {alpha}: mean {mean}");
        }
    }

    #[test]
    fn distinct_draws_are_distinct_and_uniform() {
        let mut r = StreamRng::new(17).stream("distinct");
        let mut hits = vec![0u32; 10];
        for _ in 0..10_000 {
            let picks = r.distinct(3, 10);
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3);
            for p in picks {
                hits[p] += 1;
            }
        }
        for &h in &hits {
            assert!((f64::from(h) / 30_000.0 - 0.1).abs() < 0.01);
        }
    }
}
