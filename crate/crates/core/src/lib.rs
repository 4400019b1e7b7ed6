//! Population coverage of hearing-aid preset sets.
//!
//! A user's preferred gain configuration is modelled as their prescription
//! plus one of a bank of log-linear transfer functions, each weighted by a
//! Gaussian likelihood over its low/high-frequency deviation. A preset set
//! covers a user when the presets' Chebyshev balls capture enough of that
//! likelihood mass; population coverage is the weight of covered users.
//!
//! The crate evaluates coverage, selects presets on a grid in a
//! two-component PCA plane (greedy, genetic, brute force, plus a k-means
//! baseline), evaluates slider interfaces and runs robustness experiments.

pub mod bitset;
pub mod cli;
pub mod coverage;
pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod optimize;
pub mod reduce;
pub mod slider;
pub mod synth;

pub use error::{Error, Result};
