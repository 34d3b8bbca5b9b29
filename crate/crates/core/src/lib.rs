pub mod align;
pub mod counting;
pub mod detect;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod multipoly;
pub mod rng;
pub mod series;
pub mod spectral;
pub mod stats;
pub mod trees;

pub use error::{Error, Result};
pub use model::{Model, ModelParams, TreePair};
pub use trees::Tree;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/trees.md")]
    mod trees {}
    #[doc = include_str!("../../../book/src/counting.md")]
    mod counting {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/likelihood.md")]
    mod likelihood {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/detect.md")]
    mod detect {}
    #[doc = include_str!("../../../book/src/align.md")]
    mod align {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
