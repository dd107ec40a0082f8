pub mod boxes;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hypergraph;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use boxes::{giou, iou, BBox, Corners};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// The guide's code listings, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/hypergraphs.md")]
    mod hypergraphs {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
