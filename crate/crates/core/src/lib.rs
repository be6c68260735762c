pub mod augment;
pub mod catalog;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluator;
pub mod imaging;
pub mod interpret;
pub mod label;
pub mod losses;
pub mod models;
pub mod nn;
pub mod render;
pub mod seed;
pub mod split;
pub mod toy;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use label::{ClassLabel, NUM_CLASSES};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/gradcam.md")]
    mod gradcam {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
