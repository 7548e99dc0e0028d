//! Latent iterative refinement flow.
//!
//! A manifold-preserving autoencoder, conditional flow matching in its latent
//! space, a contractive nearest-neighbour correction operator and the
//! generate–correct–augment loop that ties them together.

// `!(x > 0.0)` is deliberate: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approximator;
pub mod autoencoder;
pub mod benchhooks;
pub mod correction;
pub mod datasets;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod rng;

pub use error::{LirfError, Result};
pub use geometry::PointSet;
