//! Automatic chord estimation with bidirectional selective state-space
//! networks.
//!
//! The crate covers the whole pipeline:
//!
//! ```text
//! wav -> CQT (144 bins) -> log / z-norm -> MACE-V | MACE-H | BMACE -> frame classes -> WCSR
//! ```
//!
//! * [`numerics`]: row-major tensors and a small reverse-mode tape.
//! * [`sscan`]: selective scan (sequential and associative) and the gated block.
//! * [`model`]: the three two-block variants, parameter and FLOP accounting, checkpoints.
//! * [`features`]: WAV decoding, constant-Q transform, normalization, windowing, synthesis.
//! * [`chords`]: Harte label grammar, `.lab` files, 25 / 170 class vocabularies.
//! * [`eval`]: the seven weighted chord symbol recall comparators.
//! * [`train`]: masked cross-entropy, Adam and the training loop.

pub mod chords;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod numerics;
pub mod sscan;
pub mod store;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{DType, Real, Tensor};
