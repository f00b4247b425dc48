//! Few-shot organ segmentation with a single-branch masked U-Net.
//!
//! A query slice is segmented by a U-Net whose encoder features are
//! multiplied by a support annotation of the same organ taken from another
//! patient. Training alternates a nearest-neighbour prototype loss on the
//! encoder with a weighted cross-entropy on the full network. Everything,
//! including the differentiation engine, lives in this crate.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod fsv;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, ErrorKind, FormatError, Result};
pub use tensor::{Scalar, Tensor};
