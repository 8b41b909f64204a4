//! Laboratory for the center-position bias of convolutional networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a small deterministic tensor engine (padded convolution with
//!   zero/circular/reflect/random boundaries, max pooling, upsampling,
//!   pixel-wise cross-entropy, Adam, finite-difference gradient checks).
//! * [`unet`]: a configurable U-Net built on that engine, with training and
//!   checkpointing.
//! * [`dataset`]: placement-controlled composite segmentation samples (digit
//!   glyphs over backgrounds) and the IDX container parser.
//! * [`coco`]: object-position heatmaps from detection-style annotations.
//! * [`augment`]: periodic shift, shift-to-boundary and edge block drop.
//! * [`saliency`]: gradient saliency and saliency-shift difference maps.
//! * [`harness`]: seeded regional training / band evaluation experiments.

pub mod augment;
pub mod coco;
pub mod dataset;
mod error;
pub mod harness;
pub mod pnm;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{PaddingMode, Precision, Scalar, Shape, Tensor};
