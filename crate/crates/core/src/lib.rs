//! Predefined-time exact differentiators with bounded time-varying gains.
//!
//! A time-invariant base differentiator ([`family::CorrectionFamily`]) is
//! redesigned ([`redesign::Redesign`]) so that its error vanishes before a
//! user-chosen deadline `T_c`. [`dynamics`] simulates the result,
//! [`analysis`] and [`admissibility`] check it, and [`experiment`] ties it
//! all to configuration files and the `ptdiff` command line.
//!
//! ```
//! use ptdiff::family::CorrectionFamily;
//! use ptdiff::redesign::Redesign;
//!
//! let red = Redesign::with_defaults(CorrectionFamily::seeber(1.0, 1.0)?, 3.0, 1.0)?;
//! assert!(red.kappa(0.9) > red.kappa(0.1));
//! # Ok::<(), ptdiff::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod admissibility;
pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod family;
pub mod linalg;
pub mod redesign;
pub mod signals;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/families.md")]
    mod families {}
    #[doc = include_str!("../../../book/src/gain.md")]
    mod gain {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
