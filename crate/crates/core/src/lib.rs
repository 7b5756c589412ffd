//! Desk-scale neural-network laboratory: multi-branch batch normalization
//! with a learned domain gate, an lp-ball PGD attack suite, multi-perturbation
//! adversarial training, and closed-form domain-separation geometry for
//! linear classifiers.

pub mod attacks;
pub mod data;
pub mod error;
pub mod gbn;
pub mod geometry;
pub mod layers;
pub mod model;
pub mod tape;
pub mod train;

pub use error::Error;
pub use tape::{Tape, Tensor, Var};
