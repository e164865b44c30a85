//! Micro-action recognition toolkit.
//!
//! A ResNet-style video backbone whose residual blocks gate channels with
//! squeeze-and-excitation and exchange information between neighbouring
//! frames with a temporal channel shift, trained with cross-entropy plus a
//! label-embedding alignment loss. Evaluation covers fine and derived coarse
//! (body-part) labels. A dual-branch variant adds a face stream and a
//! temporal attention encoder for joint emotion and multi-label action
//! recognition. Synthetic seeded video datasets make everything runnable on
//! a CPU.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod embedding;
pub mod emotion;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod report;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
