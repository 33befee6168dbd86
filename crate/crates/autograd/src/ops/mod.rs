//! Numeric kernels backing the tape operations.

pub mod conv;
pub mod spatial;

pub use conv::ConvGeom;
