//! Within- and between-condition principal component analysis.
//!
//! Observations of `p` variables are split into `k` condition levels. Each
//! level gets its own PCA of the within-condition covariance, the
//! condition means get a PCA of their own, and the toolkit measures how the
//! between-condition variance is spread over components before and after
//! orthogonal rotation. The [`allocation`] module tests the loading-shape
//! constraints under which a single component can carry the whole condition
//! effect, and [`synthgen`] produces scenarios that satisfy or violate them.

pub mod allocation;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fmt;
pub mod json;
pub mod linalg;
pub mod pca;
pub mod rotation;
pub mod synthgen;

pub use error::{Error, Result};
