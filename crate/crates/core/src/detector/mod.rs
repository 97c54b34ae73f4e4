//! Miniature two-stage detector: strided conv backbone, region proposal
//! network and ROI heads, with hand-written gradients.

mod anchors;
mod boxcoder;
mod config;
mod inference;
mod losses;
mod matcher;
mod network;
mod nms;

pub use anchors::{feature_size, generate_anchors, AnchorGrid};
pub use boxcoder::{decode_deltas, encode_deltas, MAX_LOG_SCALE};
pub use config::DetectorConfig;
pub use inference::{infer, postprocess, SupervisedPass};
pub use losses::{supervised_losses, LossInputs, SupervisedLosses};
pub use matcher::{match_and_sample, MatchLabel, MatchResult, Stage};
pub use network::{
    init_params, param_layout, BackboneOut, Detector, HeadGrads, RoiOut, RoiOutputs, RpnOut, RpnOutputs,
};
pub use nms::{batched_nms, nms};

pub(crate) use losses::{bce_with_logit, smooth_l1_4, soft_cross_entropy};
pub(crate) use matcher::balanced_sample;
