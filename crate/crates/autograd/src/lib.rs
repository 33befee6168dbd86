//! Reverse-mode automatic differentiation over [`ndarray`] arrays.
//!
//! The design is a flat tape of nodes ([`Tape`]) indexed by copyable handles
//! ([`Var`]). Every backward rule is itself expressed in tape operations, so
//! gradients are ordinary tape values and can be differentiated again. That
//! property is what makes gradient-penalty style objectives (a loss built
//! from an input gradient) trainable with the same machinery as everything
//! else.
//!
//! The numeric kernels are data-parallel over batches and fixed-size chunks
//! via rayon when the `parallel` feature is enabled (the default), with a
//! sequential fallback otherwise. Chunk boundaries never depend on the
//! worker count, so results are bit-identical between the two modes; see
//! [`par`] and the `parallel` bench.

pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod par;
pub mod scalar;
pub mod tape;

pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};

/// Convenience alias: all values on a tape are dynamic-dimension arrays.
pub type Data<T> = ndarray::ArrayD<T>;

#[cfg(feature = "blas")]
extern crate blas_src;
