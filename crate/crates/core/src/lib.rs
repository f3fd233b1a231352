//! Image-set matching on the statistical manifold.
//!
//! Each feature set is modelled by a Gaussian kernel density estimate and
//! sets are compared with symmetric empirical Hellinger and Jeffrey
//! divergences. On top of those divergences the crate provides
//! positive-definite kernels, nearest-neighbour and kernel Fisher
//! discriminant classifiers, and a supervised linear dimensionality
//! reduction learned by conjugate gradient on the Grassmann manifold.

// `!(x > 0.0)` is used on purpose so NaN lands in the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod dataset;
pub mod density;
pub mod dimred;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernels;
pub mod manifold;
pub mod oracles;
pub mod validate;

pub use error::{Error, Result};
