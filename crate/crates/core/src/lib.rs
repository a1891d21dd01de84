//! Point-defect equilibria with far-field boundary conditions built from
//! force moments and continuum Green's functions.
//!
//! The usual entry points are [`study::run_study`] for a convergence study and
//! [`driver::run_orders`] for a single domain. The guide in `book/` walks
//! through the pieces in order.

pub mod cache;
pub mod config;
pub mod driver;
pub mod error;
pub mod greens;
pub mod jet;
pub mod lattice;
pub mod model;
pub mod moments;
pub mod output;
pub mod plot;
pub mod potential;
pub mod predictor;
pub mod solver;
pub mod study;
pub mod validate;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/lattice.md")]
    mod lattice {}
    #[doc = include_str!("../../../book/src/potential.md")]
    mod potential {}
    #[doc = include_str!("../../../book/src/greens.md")]
    mod greens {}
    #[doc = include_str!("../../../book/src/moments.md")]
    mod moments {}
    #[doc = include_str!("../../../book/src/relaxation.md")]
    mod relaxation {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
