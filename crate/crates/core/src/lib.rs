//! Keypoint regression for the vertebral heart score, with MC-dropout
//! pseudo-labeling of unlabeled radiographs.
//!
//! The crate is organised bottom-up:
//!
//! - [`vhs`]: keypoint geometry, the score and its classes.
//! - [`model`]: a small convolutional regressor with explicit dropout modes.
//! - [`optim`]: AdamW, the cosine schedule and gradient accumulation.
//! - [`train`]: the composite loss and the epoch loop.
//! - [`pseudo`]: Monte Carlo dropout statistics and confident-set selection.
//! - [`data`]: dataset layout on disk, annotation records and splits.
//! - [`phantom`]: synthetic images with exactly known keypoints.
//! - [`snapshot`]: a versioned binary checkpoint format.

pub mod data;
pub mod fsutil;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod pseudo;
pub mod rng;
pub mod snapshot;
pub mod train;
pub mod vhs;

pub use model::{ForwardMode, Image, ModelConfig, ModelSnapshot};
pub use vhs::{calc_vhs, classify, HeartClass, Keypoint, KeypointSet, VhsScore};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/vhs.md")]
    mod vhs {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/optim.md")]
    mod optim {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/pseudo.md")]
    mod pseudo {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
}
