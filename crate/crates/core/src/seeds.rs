//! Deterministic seed derivation: every stochastic component draws from its
//! own stream keyed by a path of integers.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Stream tags, kept stable so archives replay across versions.
pub mod tag {
    pub const SCHEDULE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const EVOKED: u64 = 3;
    pub const LAPSE: u64 = 4;
    pub const ORIENTATION: u64 = 5;
    pub const CALIBRATION: u64 = 10;
    pub const ONLINE: u64 = 11;
    pub const CONTINUOUS: u64 = 12;
    pub const TARGET_ORDER: u64 = 13;
    pub const CONDITION_ORDER: u64 = 14;
    pub const FUNCTIONAL: u64 = 15;
    pub const SWEEP: u64 = 16;
    pub const LIVE: u64 = 17;
}
