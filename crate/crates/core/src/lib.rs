//! Sequential-recommendation training harness with false-negative mining,
//! label reversal and EMA-teacher consistency regularization.

pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
pub mod distill;
pub mod encoder;
pub mod negatives;
pub mod optim;
pub mod synth;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Seeded generator used everywhere a run needs randomness.
pub type Rng = rand_chacha::ChaCha8Rng;
