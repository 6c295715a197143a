//! Counter-based random substreams.
//!
//! Every random quantity is drawn from a ChaCha stream selected by
//! `(master seed, domain, index)`. Rows, Monte Carlo draws and trials each get
//! their own stream, so growing `n` never perturbs earlier rows and parallel
//! evaluation is bit-identical to sequential evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct domains keep e.g. latent draws and output noise
/// independent even when they share a master seed.
pub mod domain {
    pub const LATENT: u64 = 0x4c41_5445_4e54;
    pub const OUTPUT: u64 = 0x4f55_5450_5554;
    pub const BRANCH: u64 = 0x4252_414e_4348;
    pub const WIDTH: u64 = 0x5749_4454_4800;
    pub const POWER: u64 = 0x504f_5745_5200;
    pub const TRIAL: u64 = 0x5452_4941_4c00;
    pub const TARGET_MC: u64 = 0x5441_5247_4554;
    pub const MIXING: u64 = 0x4d49_5849_4e47;
}

/// SplitMix64 finaliser.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    mix64(mix64(parent) ^ label.rotate_left(17))
}

/// The random stream for item `index` of `domain` under `master`.
pub fn substream(master: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, domain));
    rng.set_stream(index);
    rng
}
