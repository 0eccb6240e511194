//! Domain-incremental Wi-Fi RSS fingerprint localization.

pub mod cesa;
pub mod checkpoint;
pub mod dataio;
pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod incremental;
pub mod mlvae;
pub mod nn;
pub mod objective;
pub mod simgen;

pub use domain::DomainKey;
pub use error::{Error, Result};
