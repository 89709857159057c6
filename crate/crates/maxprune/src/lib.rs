//! Maxout-based neuron pruning and magnitude weight pruning for small CNNs.
//!
//! The guide under `book/` walks through the full pipeline; its examples run
//! as doc-tests via the [`book`] module below, so the prose cannot drift
//! from the code.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod network;
pub mod persist;
pub mod pruning;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Every fenced Rust example in the guide compiles and runs against the
/// crate as it ships.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/neuron-pruning.md")]
    mod neuron_pruning {}
    #[doc = include_str!("../../../book/src/weight-pruning.md")]
    mod weight_pruning {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
