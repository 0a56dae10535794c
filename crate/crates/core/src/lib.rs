//! Self-supervised reconstruction of visual stimuli from voxel responses.
//!
//! An encoder maps images to voxel responses and a decoder maps responses
//! back to images. The encoder is trained on paired data first; the decoder
//! is then trained with the encoder frozen on a mix of paired data,
//! unlabeled images (image → encoder → decoder → image) and unlabeled
//! responses (response → decoder → encoder → response), including the
//! responses of the test stimuli themselves.
//!
//! Modules:
//! - [`engine`]: tensors and reverse-mode differentiation
//! - [`nets`]: encoder, decoder and the fixed feature bank
//! - [`objectives`]: response loss, image loss and the cycle objectives
//! - [`cortexsim`]: a synthetic brain and cohort generator
//! - [`trainer`]: the two training phases and checkpoints
//! - [`eval`]: identification accuracy, bootstrap intervals, ablations
//! - [`io`]: on-disk formats

pub mod cortexsim;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod nets;
pub mod objectives;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
