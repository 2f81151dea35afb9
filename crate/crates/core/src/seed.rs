//! Seed derivation: every random draw in a run is keyed by a pure function
//! of the base seed and a stream path, so data assembly order does not depend
//! on scheduling.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of stream ids.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p.wrapping_add(0x632b_e59b_d9b4_e019))))
}

/// Stream ids used across the workspace.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const CAMERA: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const BASELINE: u64 = 8;
}
