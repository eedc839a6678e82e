//! Generalised sub-Finsler metrics on rank-varying distributions, their
//! monotone approximation from below by smooth Finsler metrics, and numerical
//! Carnot–Carathéodory distances.

pub mod cc_distance;
pub mod distribution;
pub mod error;
pub mod finsler_seq;
pub mod gallery;
pub mod linalg;
pub mod norm_factory;
pub mod sampling;
pub mod smoothmap;
pub mod structure;

pub use error::{Error, Result};
