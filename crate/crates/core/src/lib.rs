//! Monocular depth estimation by subspace lifting: encoder features are
//! projected onto a learned overcomplete frame whose directions pair with
//! adaptive depth bins, decoder features are enhanced in a two-vector
//! edge subspace, and depth is the probability-weighted sum of bin centres.
//!
//! Everything runs on the small reverse-mode engine in [`numcore`].

pub mod binhead;
pub mod dgr;
pub mod er;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod par;
pub mod scenes;

pub use error::{Error, Result};
