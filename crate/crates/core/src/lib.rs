//! Variational in-context reward modeling.
//!
//! A reward model that reads a handful of preference demonstrations and
//! returns a Beta posterior over the probability that one response beats
//! another. The crate contains the objective and its analytic gradients,
//! a desk-scale linear model trained on synthetic preference worlds, and the
//! evaluation procedures used to check steerability and calibration.

pub mod beta;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod rng;
pub mod specfun;
pub mod synth;
pub mod verify;

pub use beta::BetaParams;
pub use error::{Error, Result};
pub use objective::{GradPair, HeadScores, LossConfig, VariationalOutput};
