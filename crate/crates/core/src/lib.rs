//! Zero-shot plant segmentation from self-supervised patch tokens.
//!
//! An image is resized and padded to the encoder's 14-pixel patch grid, its
//! patch tokens are projected on the first principal component of a token
//! population, tokens scoring at or above a threshold become plant, and each
//! connected group of plant tokens is turned into a box prompt for a
//! promptable refiner. The union of refined masks, mapped back to the original
//! resolution, is the prediction.
//!
//! The crate also carries dataset loaders, IoU evaluation and a supervised
//! U-Net baseline used to measure how many labeled images match the
//! zero-shot result.

mod bridge;
pub mod baseline;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod maskops;
pub mod pca;
pub mod pipeline;
pub mod plot;
pub mod preprocess;
pub mod raster;
pub mod refiner;
pub mod synth;

pub use encoder::{Encoder, EncoderId, FeatureCache, SyntheticEncoder, TokenGrid};
pub use error::{Error, ErrorKind, Result, Stage};
pub use eval::{iou, EvalRecord, Predictor};
pub use maskops::{BoxPrompt, CoarseMask, Component, Connectivity};
pub use pca::{classify, PcaModel, TokenMask};
pub use pipeline::{segment_image, SegmentOptions, SegmentationResult};
pub use preprocess::{GeometrySpec, PixelBox, TokenBox, PATCH};
pub use raster::Mask;
pub use refiner::{Refiner, RefinerId, TrivialRefiner};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
