use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded, platform-independent generator used everywhere randomness enters.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose.
pub fn derived(seed: u64, purpose: &str) -> Rng {
    // FNV-1a over the purpose tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed ^ h)
}
