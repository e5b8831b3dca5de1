//! Causal bivariate transformation model for right-censored event times with
//! an endogenous binary treatment.
//!
//! The crate is `no_std` (it needs `alloc`). IO, configuration files and the
//! command line live in the companion `causaltm` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod design;
pub mod inference;
pub mod likelihood;
pub mod linalg;
pub mod numerics;
pub mod optimizer;
pub mod simulate;
pub mod splines;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
