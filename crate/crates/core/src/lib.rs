//! Balanced self-paced metric learning on small tabular datasets.
//!
//! The crate trains a unit-norm embedding network with a weighted
//! multi-similarity loss while a per-sample weight vector is optimized by a
//! doubly stochastic projection coordinate gradient solver. Sample weights
//! live in `[0, 1]^N`; an age parameter grows over alternations so that easy
//! samples join training first and mislabeled samples are driven toward
//! weight zero. A balance regularizer keeps per-class average weights close
//! to each other.
//!
//! Module map:
//!
//! - [`data`]: datasets, synthetic generation, CSV ingestion, label-noise
//!   injection, class indexing.
//! - [`embed`]: small feedforward embedding network with exact gradients.
//! - [`msloss`]: multi-similarity loss components, informative pair mining,
//!   weighted batch loss.
//! - [`weights`]: the sample-weight subproblem (objective, derivatives,
//!   stochastic coordinate gradients, box projection, solver, oracles).
//! - [`driver`]: the alternating training loop and the plain MS baseline.
//! - [`eval`]: Recall@K, NMI, and weight-balance diagnostics.

// validation guards use the negated form `!(x > 0.0)` so NaN inputs fail them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod driver;
pub mod embed;
pub mod error;
pub mod eval;
pub mod msloss;
pub mod weights;

pub use error::{Error, Result};

/// Derives a child seed from a base seed and a stream tag (splitmix64 step).
///
/// Used to give independent deterministic RNG streams to model init, batch
/// sampling, and the weight solver so that pipelines sharing a seed stay
/// bit-identical even when one of them skips a stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
