//! Anomaly segmentation from a frozen segmentation network's internals.
//!
//! Two complementary scores are computed per pixel: a multi-layer prototype
//! memory score ([`mulmem`]) and an auxiliary mimic-error score ([`auxcon`]).
//! [`eval`] fuses them and measures OOD detection quality; [`pipeline`] wires
//! everything into a reproducible, file-backed experiment.

mod binio;
pub mod auxcon;
pub mod config;
pub mod dump;
pub mod error;
pub mod eval;
pub mod micronet;
pub mod mulmem;
pub mod pipeline;
pub mod report;
pub mod scenario;
pub mod tensorgrid;

pub use error::{Error, ParseError, Result};
