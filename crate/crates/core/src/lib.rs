//! Class-prevalence estimation (quantification).
//!
//! The crate provides a small reverse-mode autodiff engine ([`diffcore`]),
//! bag/dataset types and file ingestion ([`data`]), bag sampling protocols
//! ([`protocols`]), quantification losses ([`metrics`]), classifier-based
//! quantifiers ([`classic`]) and the deep symmetric quantifiers ([`deep`]):
//! pooling baselines and the Gaussian-likelihood bag representation.

pub mod diffcore;
pub mod error;

pub use error::{Error, Result};
pub mod data;
pub mod protocols;
pub mod metrics;
pub mod classic;
pub mod deep;
