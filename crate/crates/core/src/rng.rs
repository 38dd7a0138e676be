use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; used to derive independent child seeds.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salt))
}

/// Salts for the independent random streams used across the crate.
pub mod salt {
    pub const INIT_BACKBONE: u64 = 1;
    pub const INIT_POLICY: u64 = 2;
    pub const TRAIN_DATA: u64 = 3;
    pub const HELDOUT_DATA: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const STAGE1: u64 = 6;
    pub const STAGE2: u64 = 7;
    pub const RECOVERY: u64 = 8;
    pub const GUMBEL: u64 = 9;
    pub const SCENE: u64 = 10;
    pub const BENCH: u64 = 11;
    pub const VALIDATION: u64 = 12;
}
