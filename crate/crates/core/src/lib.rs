//! Concept-driven universal targeted adversarial perturbations.
//!
//! A single additive perturbation is optimized against a vision-language
//! surrogate built from feature directions, then evaluated on victim
//! classifiers, used to warm-start a sign-flip query attack, and probed
//! against an embedding-robustness detector.

pub mod backends;
pub mod concept;
pub mod config;
pub mod craft;
pub mod dataset;
pub mod error;
pub mod images;
pub mod perturbation;
pub mod pipeline;
pub mod probe;
pub mod sampler;
pub mod sfa;
pub mod surrogate;
pub mod synthetic;
pub mod transform;
pub mod victim;

pub use error::{Error, Result};
