//! Detection accuracy, convergence speed and feature-distribution metrics.

mod ap;
mod features;

pub use ap::{ap50, convergence_time, EvalResult, IOU_THRESHOLD};
pub use features::{
    extract_features, frechet_dissimilarity, pca_embed, FeatureSample, PcaEmbedding, Pooling, COV_REGULARIZATION,
};
