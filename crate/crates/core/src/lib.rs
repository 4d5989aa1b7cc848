//! Mollified training of neural networks.
//!
//! Networks start out as near-identity, near-linear maps whose objective is
//! convex in the output layer, and are annealed toward the original
//! nonlinear network. A single per-layer level `p ∈ [0, 1]` controls both the
//! probability that a unit copies its input unchanged and the magnitude of
//! the noise injected into its activation. `p` follows a schedule coupled to
//! a moving average of the training loss.
//!
//! Modules:
//! - [`numerics`]: matrices, seeded random streams, optimizers, finite differences.
//! - [`activations`]: noisy activations and their frozen-noise gradients.
//! - [`net`]: mollified feedforward layers and networks.
//! - [`recurrent`]: mollified GRU and LSTM cells.
//! - [`annealing`]: the loss-coupled schedule for `p`.
//! - [`oracle`]: Monte-Carlo mollification of arbitrary objectives and the
//!   weak-gradient check.
//! - [`checkpoint`]: the on-disk model format.

pub mod activations;
pub mod annealing;
pub mod checkpoint;
pub mod error;
pub mod net;
pub mod numerics;
pub mod oracle;
pub mod recurrent;

pub use error::{Error, Result};
