//! The 64-bit stable hash shared by the built-in mock worker and any
//! conforming stub implementation.
//!
//! `stable_hash(fields)` runs FNV-1a 64 over each field's UTF-8 bytes, each
//! followed by the unit separator byte `0x1f`, then applies the SplitMix64
//! finalizer. `unit_interval` maps a hash to `[0, 1)` from its top 53 bits.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FIELD_SEPARATOR: u8 = 0x1f;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stable_hash<S: AsRef<str>>(fields: &[S]) -> u64 {
    let mut h = FNV_OFFSET;
    for field in fields {
        for &b in field
            .as_ref()
            .as_bytes()
            .iter()
            .chain(std::iter::once(&FIELD_SEPARATOR))
        {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    splitmix64(h)
}

pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Deterministic stream of hashes seeded by one hash value.
pub struct HashStream(u64);

impl HashStream {
    pub fn new(seed: u64) -> Self {
        HashStream(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        splitmix64(self.0)
    }
}
