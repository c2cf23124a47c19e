//! Multi-task visible/infrared image fusion.
//!
//! A shared fusion backbone feeds a two-branch head that reconstructs a fused
//! image and predicts a segmentation map; the branches exchange features via
//! hierarchical cross-attention. The crate carries its own reverse-mode
//! autodiff engine ([`diffcore`]), the differentiable image primitives and
//! losses, the network, a single-stage trainer, and an evaluation suite.

pub mod datakit;
pub mod diffcore;
pub mod error;
pub mod fusemetrics;
pub mod imgops;
pub mod lossbank;
pub mod mthnet;
pub mod trainloop;

pub use error::{Error, Result};
