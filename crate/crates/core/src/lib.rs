//! Fast-slow Lagrangian particle dynamics and their homogenized SDE limit.

pub mod acf;
pub mod coefficients;
pub mod config;
pub mod driver;
pub mod eof;
pub mod error;
pub mod harness;
pub mod homogenization;
pub mod linalg;
pub mod modes;
pub mod multiscale;
pub mod sde;
pub mod series;
pub mod stats;
pub mod trajio;
pub mod velocity;

pub use error::{Error, ErrorCategory, Result};
