//! Counter-based random streams.
//!
//! Every random quantity in the crate is a pure function of a key derived from
//! `(master seed, stream id, role, lattice point)`. Values therefore do not
//! depend on iteration order or on how work is split across threads, and
//! enlarging a window never changes the draws already made inside it.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which draw a key refers to at a given lattice point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// The innovation `eps_j`.
    Primary,
    /// The independent copy `eps'_j` used by the coupling.
    Copy,
    /// Inner replicate `k` of a nested Monte Carlo.
    Inner(u32),
    /// Bernoulli thinning of a region.
    Thinning,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Primary => 0x01,
            Role::Copy => 0x02,
            Role::Thinning => 0x03,
            Role::Inner(k) => 0x100 | (u64::from(k) << 9),
        }
    }
}

/// Derives the stream key for one lattice point.
pub fn point_key(seed: u64, stream: u64, role: Role, coords: &[i64]) -> u64 {
    let mut h = mix64(seed ^ GOLDEN);
    h = mix64(h ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    h = mix64(h ^ role.tag().wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    for &c in coords {
        h = mix64(h.wrapping_add(GOLDEN) ^ (c as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    }
    h
}

/// SplitMix64 stream: output `k` is `mix64(key + k * GOLDEN)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn for_point(seed: u64, stream: u64, role: Role, coords: &[i64]) -> Self {
        Self::new(point_key(seed, stream, role, coords))
    }

    /// Uniform draw on `[0, 1)` with 53 random bits.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Stream id for replicate `rep` of configuration `config`.
pub fn replicate_stream(config: u64, rep: u64) -> u64 {
    (config << 32) ^ rep
}
