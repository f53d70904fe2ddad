//! Reproducible random streams.
//!
//! Replica `k` of an experiment with seed `s` always draws from
//! [`derive_stream`]`(s, k)`, so results do not depend on how replicas are
//! scheduled across threads. [`KeyedNoise`] gives random access to draws by
//! `(stream, counter)`, which lets two different simulators consume exactly
//! the same driving noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Independent stream number `index` under `seed`.
pub fn derive_stream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Counter-addressed draws: the value at `(stream, counter)` is fixed by the
/// seed alone.
#[derive(Debug, Clone)]
pub struct KeyedNoise {
    key: <ChaCha8Rng as SeedableRng>::Seed,
}

impl KeyedNoise {
    pub fn new(seed: u64) -> Self {
        KeyedNoise {
            key: ChaCha8Rng::seed_from_u64(seed).get_seed(),
        }
    }

    fn at(&self, stream: u64, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(stream);
        // 16 words per counter leaves room for rejection steps in the normal sampler.
        rng.set_word_pos(u128::from(counter) * 16);
        rng
    }

    pub fn normal(&self, stream: u64, counter: u64) -> f64 {
        self.at(stream, counter).sample(StandardNormal)
    }

    /// Two uniforms on `(0, 1)`.
    pub fn uniform_pair(&self, stream: u64, counter: u64) -> (f64, f64) {
        let mut rng = self.at(stream, counter);
        (open01(&mut rng), open01(&mut rng))
    }
}

/// Uniform on the open interval `(0, 1)`.
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand::distr::Open01)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_prefix() {
        let a: Vec<u64> = derive_stream(7, 3).random_iter().take(100).collect();
        let b: Vec<u64> = derive_stream(7, 3).random_iter().take(100).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_or_streams_differ() {
        let a: Vec<u64> = derive_stream(7, 3).random_iter().take(8).collect();
        let b: Vec<u64> = derive_stream(8, 3).random_iter().take(8).collect();
        let c: Vec<u64> = derive_stream(7, 4).random_iter().take(8).collect();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn neighbouring_streams_uncorrelated() {
        let n = 10_000;
        let x: Vec<f64> = derive_stream(1, 0).random_iter().take(n).collect();
        let y: Vec<f64> = derive_stream(1, 1).random_iter().take(n).collect();
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n as f64;
        let corr = cov / (1.0 / 12.0);
        // Four standard errors of a sample correlation.
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn keyed_noise_is_random_access() {
        let k = KeyedNoise::new(11);
        let forward: Vec<f64> = (0..50).map(|c| k.normal(2, c)).collect();
        let backward: Vec<f64> = (0..50).rev().map(|c| k.normal(2, c)).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
        assert_ne!(k.normal(2, 0), k.normal(3, 0));
        let (u, v) = k.uniform_pair(5, 9);
        assert!(u > 0.0 && u < 1.0 && v > 0.0 && v < 1.0 && u != v);
    }

    #[test]
    fn keyed_normals_have_unit_variance() {
        let k = KeyedNoise::new(3);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|c| k.normal(0, c)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }
}
