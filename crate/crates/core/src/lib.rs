//! Classifiers with a `K + 1`-way softmax whose last output scores
//! "none of the known classes", trained with an energy term on
//! Langevin-sampled latents.
//!
//! The guide in `book/` walks through the modules; its code blocks run as
//! doc-tests of this crate.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod data;
pub mod diff;
pub mod energy;
pub mod error;
pub mod experiments;
pub mod model;
pub mod objective;
pub mod theory;

pub use error::{Error, Result};

// Book chapters, compiled as doc-tests so the snippets stay in step with the
// API. One module per chapter keeps failures traceable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/head.md")]
    mod head {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
