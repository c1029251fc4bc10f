//! Anchored decoding for autoregressive language models.
//!
//! Users mark spans of a prompt as *anchored*. At every decoding step the
//! model is run twice, on the real context and on a copy whose anchored
//! tokens are replaced by the mask token, and the two logit vectors are
//! mixed so that the anchored text's influence is scaled by a strength
//! `omega` (see [`anchoring`]). The crate also ships:
//!
//! - [`backend`]: a deterministic toy transformer and a line-JSON logit
//!   server/client, behind one [`Backend`](backend::Backend) trait;
//! - [`decoding`]: greedy, anchored greedy and hybrid anchored beam search;
//! - [`analysis`]: attention-to-prompt ratios, gradient sensitivity and
//!   length statistics;
//! - [`tuning`]: k-fold grid search for `omega`;
//! - [`harness`]: corpus loading, sandboxed tests, gated anchoring, Pass@k.

pub mod analysis;
pub mod anchoring;
pub mod backend;
mod clock;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod tuning;

#[cfg(not(target_arch = "wasm32"))]
pub mod cli;

pub use error::{Error, Result};
