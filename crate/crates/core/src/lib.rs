//! Domain-adaptive object detection with student-teacher self-distillation
//! on a miniature two-stage detector.

pub mod align;
pub mod augment;
pub mod datamodel;
pub mod detector;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod trainer;

pub use datamodel::{
    iou, Annotation, BoundingBox, DetectionDataset, Domain, DomainPair, Image, ImageRecord, Prediction,
};
pub use error::{Error, Result};
pub use params::{ParamSet, Tensor};
