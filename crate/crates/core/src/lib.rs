//! Expected-gradients feature attribution and attribution-prior training for
//! small feed-forward networks.

pub mod attrib;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod nn;
pub mod par;
pub mod priors;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
