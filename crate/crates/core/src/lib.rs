//! Instruction-guided dual-branch vision encoding at desk scale.
//!
//! A frozen vision transformer is evaluated twice per image: once as-is
//! (the static branch) and once with every block's layer norms replaced by
//! adaptive layer norms driven by an instruction embedding (the conditioned
//! branch). A zero-initialised projection fuses the two so that a fresh model
//! reproduces the static features exactly. Around that core sit a toy text
//! encoder, a multiple-choice answer head, staged training, a synthetic
//! four-questions-per-image benchmark and its at-least-n-of-four scorer.

pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod export;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod textenc;
pub mod training;
pub mod visenc;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
