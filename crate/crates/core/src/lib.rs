//! Zero-query adversarial attacks on video classifiers.
//!
//! The pipeline picks the frame of an attack video with the largest dense
//! optical flow, extracts a guided-backpropagation gradient map from a 3D-CNN
//! at that frame, and adds the rectified map as a temporally constant,
//! ℓ∞-bounded perturbation to a clean victim video. The victim model is never
//! queried while the perturbation is built.
//!
//! Modules:
//! - [`vidcore`]: video tensors, frame transforms, `.vten`/PNM I/O
//! - [`optflow`]: single-scale Farneback flow and max-flow frame selection
//! - [`net3d`]: a small 3D-CNN with exact backprop, guided backprop and Grad-CAM
//! - [`attack`]: perturbation construction and attack variants
//! - [`metrics`]: SSIM, PSNR, temporal inconsistency, attack success rate
//! - [`defenses`]: temporal shuffling, learned defense patterns, residual ASR
//! - [`harness`]: synthetic data, campaigns, sweeps and reports

pub mod attack;
pub mod defenses;
mod error;
pub mod harness;
pub mod metrics;
pub mod net3d;
pub mod optflow;
pub mod vidcore;

pub use error::{Error, Result};
