//! Keyed pseudo-random draws for DARE.
//!
//! Each draw is independent of iteration order: the key
//! `(seed, target index, tensor name, flat index)` is hashed with 64-bit FNV-1a
//! and the hash seeds one splitmix64 step. The hashed byte string is
//! `seed (u64 LE) ‖ target (u64 LE) ‖ len(name) (u64 LE) ‖ name (UTF-8) ‖ index (u64 LE)`.
//! The top 53 bits of the output divided by 2^53 give a value in `[0, 1)`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub fn key_hash(seed: u64, target: usize, tensor: &str, index: usize) -> u64 {
    let mut bytes = Vec::with_capacity(32 + tensor.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&(target as u64).to_le_bytes());
    bytes.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
    bytes.extend_from_slice(tensor.as_bytes());
    bytes.extend_from_slice(&(index as u64).to_le_bytes());
    fnv1a64(&bytes)
}

/// Uniform draw in `[0, 1)` for one scalar of one target.
pub fn keyed_uniform(seed: u64, target: usize, tensor: &str, index: usize) -> f64 {
    SplitMix64::new(key_hash(seed, target, tensor, index)).next_f64()
}
