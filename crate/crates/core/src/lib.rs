//! Guided rectified-flow sampling over sparse voxel latents.
//!
//! A query shape is a set of active voxels carrying latent vectors
//! ([`slat::StructuredLatent`]). Sampling starts from Gaussian noise on those
//! voxels and integrates a velocity field back to `t = 0`, interleaving
//! latent-space optimization of a guidance loss:
//!
//! * [`guidance::appearance_loss`] pulls each query latent toward its matched
//!   appearance latent, with matches from [`partition::build_correspondence`];
//! * [`guidance::structure_loss`] keeps parts found by
//!   [`partition::cosegment`] coherent through self-similarity.
//!
//! The velocity fields in [`toyflows`] have closed forms, so every stage can
//! be checked against an exact answer. The guide in `book/` walks through
//! the math.

pub mod error;
pub mod evalagg;
pub mod flow;
pub mod gradcheck;
pub mod guidance;
pub mod io;
pub mod matrix;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod slat;
pub mod toyflows;

pub use error::{Error, ErrorKind, Result};
pub use matrix::Matrix;

/// The guide's code samples, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/latents.md")]
    mod latents {}
    #[doc = include_str!("../../../book/src/partition.md")]
    mod partition {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/toyflows.md")]
    mod toyflows {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
