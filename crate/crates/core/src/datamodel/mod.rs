//! Images, annotations, datasets, and box geometry.

pub mod boxes;
pub mod coco;
pub mod dataset;
pub mod png;
pub mod synthetic;

pub use boxes::{iou, BoundingBox};
pub use coco::{load_coco, save_coco};
pub use dataset::{Annotation, DetectionDataset, Domain, DomainPair, Image, ImageRecord, Prediction};
pub use synthetic::{make_synthetic_shift, ShiftParams, SyntheticConfig};
