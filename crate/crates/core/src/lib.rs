//! Binary image segmentation with a U-Net decoder on a MobileNetV2 encoder.
//!
//! The crate is self-contained: [`tensor`] provides dense NCHW tensors and a
//! tape-based reverse-mode autodiff over exactly the layers the network needs,
//! [`model`] assembles the encoder/decoder, [`data`] loads and augments
//! image/mask pairs, and [`train`] holds the loss, metrics, optimizer, early
//! stopping, and checkpoint format. [`gradcheck`] compares every analytic
//! gradient rule against central finite differences.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, Tensor, Var};
