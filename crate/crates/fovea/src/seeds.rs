//! Deterministic seed derivation.
//!
//! Every stochastic choice in the crate draws from a [`rand_chacha::ChaCha8Rng`]
//! seeded through [`derive_seed`], so runs are reproducible from a single
//! master seed and resumed runs replay the exact stream: the seed for epoch
//! `e` / record `i` is a pure function of `(master, tags...)`, independent of
//! thread scheduling or how much of the run already happened.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated consumers of the same master seed apart.
pub mod tag {
    pub const INIT_ENCODER: u64 = 0x01;
    pub const INIT_PROJECTOR: u64 = 0x02;
    pub const INIT_HEAD: u64 = 0x03;
    pub const SYNTH_IMAGE: u64 = 0x10;
    pub const SPLIT: u64 = 0x11;
    pub const SHUFFLE: u64 = 0x12;
    pub const AUGMENT: u64 = 0x13;
    pub const ANNEAL: u64 = 0x14;
    pub const HOLDOUT: u64 = 0x15;
    pub const FINETUNE: u64 = 0x16;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a list of tags into a new 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0xA076_1D64_78BD_642F;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        out ^= splitmix64(&mut state);
    }
    out
}

/// RNG seeded from `derive_seed(master, tags)`.
pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Standard normal sample via Box-Muller, so initializers need no extra
/// distribution crate.
pub fn normal(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen::<f64>();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
