//! High-resolution multi-scale 3D segmentation of brain tumors in
//! multi-modal MR volumes.
//!
//! * [`tensor`]: dense tensors, differentiable ops and reverse-mode autodiff
//! * [`nn`]: convolutional block, parallel multi-scale fusion, EM attention
//!   and the two semantic-discrimination-enhancing blocks
//! * [`network`]: the assembled network and its ablation variants
//! * [`data`]: NIfTI-1 I/O, preprocessing, augmentation, synthetic studies
//! * [`engine`]: loss, schedule, optimizer, training and sliding-window inference
//! * [`metrics`]: Dice, HD95 and cohort reports

pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod network;
pub mod par;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
