//! Two-stage lung nodule detection on 2.5D CT slice stacks.
//!
//! A dual-path U-Net backbone builds a five-level feature pyramid; a region
//! proposal network scores anchors on every level and a region classifier
//! refines the pooled proposals. Everything numeric is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix the common choices.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod targets;
pub mod tensor;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, DecoderType, FeaturePyramid};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use model::{Detector, DetectorConfig, ProposalConfig, ScoredBox};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{LossBreakdown, TrainConfig, Trainer};

pub type Detector32 = Detector<f32>;
pub type Detector64 = Detector<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Box32 = BBox<f32>;
pub type Box64 = BBox<f64>;
