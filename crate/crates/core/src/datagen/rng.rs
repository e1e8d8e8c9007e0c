use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded ChaCha8 stream with deterministic splitting.
///
/// A split child keeps the root seed and moves to a fresh ChaCha stream id
/// derived from the parent's stream id and its split counter, so children
/// never share keystream with their parent or with each other.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    splits: u64,
    inner: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            splits: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream; advances this generator's split counter only.
    pub fn split(&mut self) -> SeededRng {
        self.splits += 1;
        let child = mix(self.stream ^ mix(self.splits));
        Self::with_stream(self.seed, child)
    }

    /// Stream addressed by a key path under this generator's stream. Pure:
    /// the same keys always give the same stream, independent of any
    /// draws or splits made so far.
    pub fn substream(&self, keys: &[u64]) -> SeededRng {
        let stream = keys
            .iter()
            .fold(mix(self.stream ^ 0x5EED_5EED_5EED_5EED), |s, &k| mix(s ^ mix(k)));
        Self::with_stream(self.seed, stream)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
