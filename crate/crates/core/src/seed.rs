//! Deterministic seed derivation for independent random streams.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `parts` under `base`. Distinct part sequences give
/// unrelated seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Stream tags so that e.g. the decoder's init and the mask fill never share
/// a generator.
pub mod stream {
    pub const ENCODER_INIT: u64 = 1;
    pub const ENCODER_SHUFFLE: u64 = 2;
    pub const DECODER_INIT: u64 = 3;
    pub const DECODER_SHUFFLE: u64 = 4;
    pub const MASK_FILL: u64 = 5;
    pub const CLASSIFIER_INIT: u64 = 6;
    pub const CLASSIFIER_SHUFFLE: u64 = 7;
    pub const FINETUNE_SHUFFLE: u64 = 8;
    pub const FINETUNE_MASK: u64 = 9;
    pub const TRAIN_DATA: u64 = 10;
    pub const TEST_DATA: u64 = 11;
}
