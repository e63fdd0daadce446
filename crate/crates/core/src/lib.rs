//! Bayesian digital twin for reaction–diffusion tumor growth.

pub mod dataio;
pub mod error;
pub mod fem;
pub mod forward;
pub mod inverse;
pub mod laplace;
pub mod map_solver;
pub mod mesh;
pub mod prior;
pub mod qoi;
pub mod sparse;
pub mod study;

pub use error::{Error, Result};

/// Library version, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/forward-model.md")]
    mod forward_model {}
    #[doc = include_str!("../../../book/src/prior.md")]
    mod prior {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/laplace.md")]
    mod laplace {}
    #[doc = include_str!("../../../book/src/qoi.md")]
    mod qoi {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
