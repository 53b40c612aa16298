//! Medium-transmission guided underwater image restoration.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, Adam and the `MTTB`
//!   tensor container.
//! * [`imaging`]: RGB/gray images, PNG/PPM/MTTB I/O and colour conversions.
//! * [`physics`]: dark channel, airlight and transmission estimation, the
//!   image-formation model and its inverse, synthetic transmission maps.
//! * [`network`]: the two-branch restoration network and its ablations.
//! * [`training`]: synthetic paired data, loss, training loop, inference.
//! * [`metrics`]: PSNR, SSIM, UCIQE, UIQM, evaluation reports and the FPS
//!   benchmark.

pub mod error;
pub mod imaging;
pub mod metrics;
pub mod network;
pub mod physics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
