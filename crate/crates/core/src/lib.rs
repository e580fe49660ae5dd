//! Super-resolution of synthetic 4D flow MRI.
//!
//! The crate covers the whole chain on a single machine:
//!
//! - [`flowfield`]: analytic tube flows (Poiseuille, helical, stenosed) with
//!   a pulsatile waveform.
//! - [`mrencode`] and [`kspace`]: phase-contrast encoding, k-space
//!   truncation to half resolution with complex noise at a target SNR, and
//!   decoding back to velocity.
//! - [`dataset`]: augmented LR/HR patch pairs and whole-frame test volumes in
//!   the checksummed `F4D1` container.
//! - [`net`] and [`train`]: a 3D residual network that doubles resolution,
//!   written against plain slices with its own backward pass, trained with
//!   Adam on an MSE plus velocity-gradient loss. Weights live in `F4DW` files.
//! - [`infer`]: overlapping patch prediction and stitching of full volumes.
//! - [`eval`]: relative speed error, flow rate, divergence and
//!   Bland-Altman statistics, with trilinear, tricubic and sinc baselines.
//! - [`pipeline`]: the five file-based stages behind the `flow4dsr` binary.
//!
//! Results do not depend on the thread count; set `FLOW4DSR_THREADS` to
//! size the pool.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod flowfield;
pub mod infer;
pub mod kspace;
pub mod mrencode;
pub mod net;
pub mod pipeline;
pub mod seed;
pub mod sys;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
