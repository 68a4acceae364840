#![allow(clippy::needless_range_loop)]

pub mod block;
pub mod check;
pub mod error;
pub mod image;
pub mod lab;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod ssm;
pub mod tracker;

pub use error::{Error, Result};
pub use scalar::Scalar;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scan.md")]
    mod scan {}
    #[doc = include_str!("../../../book/src/block.md")]
    mod block {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/lab.md")]
    mod lab {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
