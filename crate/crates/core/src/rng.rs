//! Deterministic, splittable random streams.
//!
//! Every random draw in the crate comes from a [`Stream`] derived from a
//! [`StreamKey`]. The generator is fixed (splitmix64 key mixing feeding a
//! xoshiro256++ sequence) so that any implementation following the same
//! recipe reproduces masks bit for bit:
//!
//! 1. `state = 0`; for each key field in order (seed, layer, sample, adapter):
//!    `state = mix64((state ^ field) + GOLDEN_GAMMA)`.
//! 2. The xoshiro256++ state words are the first four outputs of a splitmix64
//!    generator started at `state`.
//! 3. A uniform double is `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! 4. `bernoulli(q)` consumes exactly one uniform and returns `u < q`.

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const INV_2_POW_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub layer_index: u64,
    pub sample_index: u64,
    pub adapter_index: u64,
}

impl StreamKey {
    pub fn new(seed: u64, layer_index: u64, sample_index: u64, adapter_index: u64) -> Self {
        Self {
            seed,
            layer_index,
            sample_index,
            adapter_index,
        }
    }

    /// Keys for adapters `0..k` sharing seed, layer and sample.
    pub fn per_adapter(seed: u64, layer_index: u64, sample_index: u64, k: usize) -> Vec<StreamKey> {
        (0..k as u64)
            .map(|j| StreamKey::new(seed, layer_index, sample_index, j))
            .collect()
    }

    fn mixed_state(&self) -> u64 {
        [self.seed, self.layer_index, self.sample_index, self.adapter_index]
            .iter()
            .fold(0u64, |state, &field| mix64((state ^ field).wrapping_add(GOLDEN_GAMMA)))
    }
}

/// The splitmix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn splitmix64_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    mix64(*state)
}

/// xoshiro256++ generator. Single consumer; derive one stream per task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    s: [u64; 4],
}

/// Derives the stream for `key`. Identical keys give identical streams.
pub fn derive_stream(key: StreamKey) -> Stream {
    Stream::from_key(key)
}

impl Stream {
    pub fn from_key(key: StreamKey) -> Self {
        let mut sm = key.mixed_state();
        let s = [
            splitmix64_next(&mut sm),
            splitmix64_next(&mut sm),
            splitmix64_next(&mut sm),
            splitmix64_next(&mut sm),
        ];
        Self { s }
    }

    /// Raw state constructor, mainly for reference test vectors. An all-zero
    /// state is a fixed point of the generator.
    pub fn from_state(s: [u64; 4]) -> Self {
        Self { s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform double in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * INV_2_POW_53
    }

    #[inline]
    pub fn bernoulli(&mut self, q: f64) -> bool {
        self.next_f64() < q
    }

    /// Uniform in `[lo, hi)`, narrowed to f32.
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let u = self.next_f64();
        (lo as f64 + (hi as f64 - lo as f64) * u) as f32
    }
}
