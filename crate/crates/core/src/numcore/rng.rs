use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-based random stream keyed by `(seed, stream_id)`.
///
/// ChaCha is a counter-mode generator, so the draw sequence is a pure
/// function of the key and is identical on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Compose a stream id from a namespace tag and an index.
pub const fn stream_id(namespace: u32, index: u64) -> u64 {
    ((namespace as u64) << 40) ^ index
}

/// Stream namespaces used across the crate; every random draw in a run is
/// keyed by `(seed, stream_id(namespace, index))`.
pub mod streams {
    pub const SOURCE_CORPUS: u32 = 1;
    pub const TARGET_CORPUS: u32 = 2;
    pub const VALIDATION_CORPUS: u32 = 3;
    pub const MODEL_INIT: u32 = 10;
    pub const OFFLINE_ORDER: u32 = 11;
    pub const OFFLINE_MASK: u32 = 12;
    pub const TASK_SET: u32 = 13;
    pub const META_ORDER: u32 = 14;
    pub const META_MASK: u32 = 15;
    pub const TTT_MASK: u32 = 16;
    pub const EVAL_MASK: u32 = 17;
}

/// Mask stream for the sample `(scene, t)`; the same key in pre-training and
/// at test time gives the same mask.
pub fn sample_stream(seed: u64, namespace: u32, scene: u64, t: usize, salt: u64) -> RngStream {
    RngStream::new(seed ^ salt.rotate_left(17), stream_id(namespace, (scene << 20) ^ t as u64))
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream under the same seed.
    pub fn child(&self, stream: u64) -> RngStream {
        RngStream::new(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }
}
