//! Probabilistic prediction and density steering for multi-lane highway driving.
//!
//! The crate is organised as a two-layer pipeline:
//!
//! * **prediction** ([`liouville`], [`policy`]): each vehicle's Gaussian state
//!   belief is sampled into a weighted particle cloud and transported along the
//!   characteristics of the Liouville equation of its closed-loop bicycle model;
//! * **assessment** ([`risk`], [`barycenter`]): collision probabilities between
//!   forecast `(x, y)` marginals decide whether to keep the lane or to merge into
//!   a gap, whose Wasserstein barycenter becomes the desired terminal density;
//! * **steering** ([`bridge`]): a Schrödinger bridge over the flat (Brunovsky)
//!   coordinates of the bicycle model ([`flatness`]) transfers the ego density to
//!   the target, using the closed-form Gramians of [`gramian`].
//!
//! [`scenario`] and [`pipeline`] wire the layers together for the CLI.

pub mod barycenter;
pub mod bench;
pub mod bridge;
mod error;
pub mod flatness;
pub mod gramian;
pub mod liouville;
pub mod measure;
pub mod numeric;
pub mod pipeline;
pub mod policy;
pub mod risk;
pub mod scenario;

pub use error::{Error, Result};
