//! Inference of a latent equipment-deterioration process hidden under
//! yearly imperfect maintenance, from annual failure-count panels.
//!
//! The pipeline: impute missing counts with a hierarchical additive
//! Gaussian process ([`gp`]), standardize and classify counts into three
//! deterioration states ([`fleet`]), estimate deterioration rates and
//! maintenance probabilities by MCMC or maximum likelihood ([`inference`])
//! under a shared latent state trajectory ([`hmm`], [`ctmc`]), then score
//! predictions ([`evaluation`]) and validate the sampler by
//! simulation-based calibration ([`sbc`]).

pub mod cli;
pub mod ctmc;
pub mod error;
pub mod evaluation;
pub mod fleet;
pub mod gp;
pub mod hmm;
pub mod inference;
pub mod mcmc;
pub mod optim;
pub mod sbc;
pub mod stats;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};

/// RNG for an independent stream `stream` under a user seed. Chains,
/// replications and split repeats each take their own stream index.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from `(seed, index)` with a splitmix64 step.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
