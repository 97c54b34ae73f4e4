use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyper-parameters of the miniature two-stage detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_channels: usize,
    /// Output channels of each stride-2 backbone convolution.
    pub backbone_channels: Vec<usize>,
    /// Must equal `2^len(backbone_channels)`.
    pub feature_stride: usize,
    pub rpn_channels: usize,
    /// Anchor side lengths in pixels.
    pub anchor_sizes: Vec<f64>,
    /// Height-over-width ratios.
    pub anchor_aspect_ratios: Vec<f64>,
    pub num_classes: usize,

    pub rpn_samples: usize,
    pub rpn_fg_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    /// Also mark each ground truth's best-overlapping anchors as foreground.
    pub rpn_low_quality_matches: bool,
    pub roi_samples: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
    pub roi_bg_iou: f64,

    pub pre_nms_proposals: usize,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub proposal_nms_iou: f64,
    pub min_proposal_size: f64,

    pub roi_pool_size: usize,
    pub roi_sampling_ratio: usize,
    pub roi_hidden: usize,

    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub smooth_l1_beta: f64,
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            backbone_channels: vec![16, 32, 64],
            feature_stride: 8,
            rpn_channels: 64,
            anchor_sizes: vec![16.0, 32.0],
            anchor_aspect_ratios: vec![0.5, 1.0, 2.0],
            num_classes: 2,
            rpn_samples: 256,
            rpn_fg_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_low_quality_matches: true,
            roi_samples: 512,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            roi_bg_iou: 0.5,
            pre_nms_proposals: 600,
            train_proposals: 128,
            test_proposals: 100,
            proposal_nms_iou: 0.7,
            min_proposal_size: 1.0,
            roi_pool_size: 4,
            roi_sampling_ratio: 2,
            roi_hidden: 128,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            smooth_l1_beta: 1.0,
            pixel_mean: 0.5,
            pixel_std: 0.25,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_aspect_ratios.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&self.input_channels)
    }

    /// Width of the pooled ROI feature vector.
    pub fn roi_input_len(&self) -> usize {
        self.feature_channels() * self.roi_pool_size * self.roi_pool_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return fail("detector.backbone_channels must be non-empty and positive".into());
        }
        let stride = 1usize << self.backbone_channels.len();
        if self.feature_stride != stride {
            return fail(format!(
                "detector.feature_stride {} must be {stride} for {} backbone layers",
                self.feature_stride,
                self.backbone_channels.len()
            ));
        }
        if self.anchor_sizes.is_empty() || self.anchor_aspect_ratios.is_empty() {
            return fail("detector anchor sizes and ratios must be non-empty".into());
        }
        if self
            .anchor_sizes
            .iter()
            .chain(&self.anchor_aspect_ratios)
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return fail("detector anchor sizes and ratios must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("detector.num_classes must be at least 1".into());
        }
        for (name, f) in [
            ("rpn_fg_fraction", self.rpn_fg_fraction),
            ("roi_fg_fraction", self.roi_fg_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return fail(format!("detector.{name} must be in (0, 1)"));
            }
        }
        for (name, v) in [
            ("rpn_fg_iou", self.rpn_fg_iou),
            ("rpn_bg_iou", self.rpn_bg_iou),
            ("roi_fg_iou", self.roi_fg_iou),
            ("roi_bg_iou", self.roi_bg_iou),
            ("proposal_nms_iou", self.proposal_nms_iou),
            ("nms_iou", self.nms_iou),
            ("score_threshold", self.score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("detector.{name} must be in [0, 1]"));
            }
        }
        if self.rpn_bg_iou > self.rpn_fg_iou || self.roi_bg_iou > self.roi_fg_iou {
            return fail("background IoU thresholds must not exceed foreground thresholds".into());
        }
        if self.rpn_samples == 0
            || self.roi_samples == 0
            || self.train_proposals == 0
            || self.test_proposals == 0
            || self.pre_nms_proposals == 0
            || self.roi_pool_size == 0
            || self.roi_sampling_ratio == 0
            || self.roi_hidden == 0
            || self.rpn_channels == 0
        {
            return fail("detector sample counts and layer sizes must be positive".into());
        }
        if !(self.smooth_l1_beta >= 0.0) || !(self.pixel_std > 0.0) {
            return fail("detector.smooth_l1_beta must be >= 0 and pixel_std > 0".into());
        }
        Ok(())
    }
}
