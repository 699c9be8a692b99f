use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every seeded draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a master seed with one SplitMix64
/// round over `master + (index + 1) * golden_gamma`.
///
/// Used wherever a run fans out into numbered sub-runs (batches, repeated
/// trials, object pairs) so each sub-run can be reproduced on its own.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
