//! Domain-class correlation decomposition on synthetic multi-domain data.

mod binio;
pub mod dccd;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod net;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
