//! A laboratory for adversarially robust learning that combines transduction
//! and rejection.
//!
//! The crate provides:
//!
//! - [`numcore`]: a dense feed-forward network with exact gradients and Adam,
//!   the substrate every gradient-based routine here runs on;
//! - [`data`]: dataset generation/ingestion and the l∞ perturbation-set
//!   algebra (`U`, `U^k`, projection, domain clipping);
//! - [`attack`]: PGD, the decision-boundary surrogate, the rejection-aware
//!   loss, the multitargeted loss, and the inductive rejection-aware attack;
//! - [`defense`]: adversarial training, the TLDR transductive objective with
//!   warm start, and the rejection transform producing a selective classifier;
//! - [`transduction`]: rejection-aware GMSA and the rejection-aware transfer
//!   attack;
//! - [`eval`]: robust-error-with-rejection metrics and experiment reports;
//! - [`theory`]: brute-force verification of the realizable-case sample
//!   complexity bound on 1-D threshold classes, plus closed-form bound
//!   calculators;
//! - [`cli`]: configuration and orchestration for the `tldr-lab` binary.
//!
//! Data-parallel inner loops (per-point attacks, Monte Carlo trials, batch
//! evaluation) go through [`parallel`], which uses rayon when the default
//! `parallel` feature is enabled and falls back to sequential iteration
//! otherwise. Results are written into indexed slots, so outputs are
//! bit-identical across thread counts.

pub mod attack;
pub mod cli;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod numcore;
pub mod parallel;
pub mod theory;
pub mod transduction;

pub use error::{Error, Result};
pub use matrix::RealMatrix;

/// Derives an independent RNG seed from a root seed, a role tag, and an item
/// index.
///
/// Every parallel loop seeds each item's RNG stream through this, so results
/// do not depend on scheduling or thread count. Mixing is splitmix64-style
/// over the root, the tag bytes, and the index.
pub fn seed_derive(root: u64, role: &str, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = mix(root);
    for &b in role.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}
