//! Named, independently seeded random streams.
//!
//! Each stream is a splitmix64 generator keyed by (scenario seed, stream
//! label), so adding or removing one workload or fault source never perturbs
//! the draws of any other. All arithmetic is wrapping 64-bit integer math and
//! the only float transcendental (`ln` for exponential sampling) goes through
//! `libm`, so sequences are identical across platforms.

use std::collections::BTreeMap;

/// Generator name advertised in report headers.
pub const RNG_ALGORITHM: &str = "splitmix64";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// One independent random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    /// Derive a stream from the scenario seed and a stable label. Equal
    /// (seed, label) pairs always yield the same sequence.
    pub fn new(seed: u64, stream_id: &str) -> Self {
        RngStream {
            state: mix64(seed ^ fnv1a64(stream_id.as_bytes())),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_unit() < p
    }

    /// Exponential draw with the given mean, in milliseconds.
    pub fn exp_ms(&mut self, mean_ms: f64) -> u64 {
        let u = self.next_unit();
        let draw = -mean_ms * libm::log(1.0 - u);
        if draw <= 0.0 {
            0
        } else if draw >= u64::MAX as f64 {
            u64::MAX
        } else {
            libm::round(draw) as u64
        }
    }
}

/// Lazily created streams for one run, addressed by label.
pub struct StreamSet {
    seed: u64,
    streams: BTreeMap<String, RngStream>,
}

impl StreamSet {
    pub fn new(seed: u64) -> Self {
        StreamSet {
            seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, id: &str) -> &mut RngStream {
        let seed = self.seed;
        self.streams
            .entry(id.to_string())
            .or_insert_with(|| RngStream::new(seed, id))
    }
}
