//! Non-local symmetric forms on truncated weighted sequence spaces.
//!
//! The crate realizes Euclidean field measures (the free field and its
//! Wick-ordered perturbations) and particle configurations in eigenbasis
//! coordinates of a Hilbert-Schmidt operator, evaluates coordinate-wise
//! heavy-tailed jump forms on cylinder functions, simulates reversible jump
//! chains for those measures, and checks the quantitative identities and
//! bounds that accompany them.

pub mod chain;
pub mod error;
pub mod free_field;
pub mod interactions;
pub mod local_limit;
pub mod nonlocal;
pub mod particles;
pub mod quadrature;
pub mod regularity;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
