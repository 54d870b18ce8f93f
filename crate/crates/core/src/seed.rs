//! Seed derivation. Every stochastic step draws from a stream keyed by the
//! run seed plus a tag path, so results never depend on call order.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t)))
}

/// Uniform in [0, 1) from a hashed word.
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 / (1u64 << 53) as f64
}

pub mod tag {
    pub const SUBSAMPLE: u64 = 0x5355_4253;
    pub const SMI_XL: u64 = 0x584c;
    pub const SMI_LY: u64 = 0x4c59;
    pub const JITTER: u64 = 0x4a49_5454;
    pub const RANDOM_CONFIG: u64 = 0x5241_4e44;
    pub const FIXTURE: u64 = 0x4649_5854;
    pub const CALIBRATION: u64 = 0x4341_4c49;
}
