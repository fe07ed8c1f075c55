//! Seed derivation: a master seed fans out into independent per-stage seeds
//! so any stage can be rerun in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stages that consume randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Data,
    Init,
    BaseShuffle,
    BaseDropout,
    TokenHeadInit,
    PostHocShuffle,
    PostHocDropout,
    Masking,
    Estimators,
    Probe,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Data => 0x01,
            Stage::Init => 0x02,
            Stage::BaseShuffle => 0x03,
            Stage::BaseDropout => 0x04,
            Stage::TokenHeadInit => 0x05,
            Stage::PostHocShuffle => 0x06,
            Stage::PostHocDropout => 0x07,
            Stage::Masking => 0x08,
            Stage::Estimators => 0x09,
            Stage::Probe => 0x0a,
        }
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stage: Stage) -> u64 {
    splitmix64(master ^ splitmix64(stage.tag()))
}

/// Seed for a sub-index of a stage (an epoch, a pass, ...).
pub fn derive_indexed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5151)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for one numbered stream of a seed. Per-example work draws from
/// stream = example index so results do not depend on scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
