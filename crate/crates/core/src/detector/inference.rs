use super::anchors::{generate_anchors, AnchorGrid};
use super::boxcoder::decode_unchecked;
use super::config::DetectorConfig;
use super::losses::{supervised_losses, LossInputs, SupervisedLosses};
use super::matcher::{match_and_sample, MatchResult, Stage};
use super::network::{BackboneOut, Detector, HeadGrads, RoiOut, RoiOutputs, RpnOut};
use super::nms::batched_nms;
use crate::datamodel::{Annotation, BoundingBox, Image, ImageRecord, Prediction};
use crate::error::Result;
use crate::nn::softmax;
use crate::params::ParamSet;
use crate::rng::derive_seed;

/// Per-class scoring, thresholding and NMS of ROI head outputs.
pub fn postprocess(
    proposals: &[BoundingBox],
    roi: &RoiOutputs,
    image_h: usize,
    image_w: usize,
    config: &DetectorConfig,
) -> Vec<Prediction> {
    let bounds = Some((image_w as f64, image_h as f64));
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    let mut classes = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let probs = softmax(&roi.class_logits[i]);
        let b = decode_unchecked(p, &roi.box_deltas[i], bounds);
        if !(b.width() > 0.0 && b.height() > 0.0) {
            continue;
        }
        for (c, &s) in probs[..config.num_classes].iter().enumerate() {
            if s > config.score_threshold {
                boxes.push(b);
                scores.push(s);
                classes.push(c);
            }
        }
    }
    let mut keep = batched_nms(&boxes, &scores, &classes, config.nms_iou);
    keep.truncate(config.max_detections);
    keep.into_iter()
        .map(|i| Prediction {
            bbox: boxes[i],
            class_id: classes[i],
            score: scores[i],
        })
        .collect()
}

impl Detector<'_> {
    /// Full test-time pass on one image.
    pub fn predict(&self, image: &Image) -> Result<Vec<Prediction>> {
        let bb = self.backbone(image)?;
        let rpn = self.rpn(&bb)?;
        let anchors = generate_anchors(self.config, image.height, image.width)?;
        let props = self.proposals(&rpn.outputs, &anchors, image.height, image.width, self.config.test_proposals);
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let roi = self.roi(&bb, &props)?;
        Ok(postprocess(&props, &roi.outputs, image.height, image.width, self.config))
    }

    /// Training forward pass against box annotations: proposals from the
    /// current RPN (treated as constants) plus the annotations themselves.
    pub fn supervised_pass(&self, image: &Image, gts: &[Annotation], seed: u64) -> Result<SupervisedPass> {
        let backbone = self.backbone(image)?;
        let rpn = self.rpn(&backbone)?;
        let anchors = generate_anchors(self.config, image.height, image.width)?;
        let rpn_match = match_and_sample(&anchors.boxes, gts, Stage::Rpn, self.config, derive_seed(seed, &[1]));
        let mut candidates = self.proposals(
            &rpn.outputs,
            &anchors,
            image.height,
            image.width,
            self.config.train_proposals,
        );
        candidates.extend(gts.iter().map(|a| a.bbox));
        let roi_match = match_and_sample(&candidates, gts, Stage::Roi, self.config, derive_seed(seed, &[2]));
        let roi_boxes: Vec<BoundingBox> = roi_match.sampled.iter().map(|&i| candidates[i]).collect();
        let roi = self.roi(&backbone, &roi_boxes)?;
        Ok(SupervisedPass {
            backbone,
            rpn,
            roi,
            anchors,
            rpn_match,
            roi_boxes,
            roi_match,
        })
    }
}

/// Forward state of one supervised image, ready for loss and backward.
#[derive(Clone, Debug)]
pub struct SupervisedPass {
    pub backbone: BackboneOut,
    pub rpn: RpnOut,
    pub roi: RoiOut,
    pub anchors: AnchorGrid,
    pub rpn_match: MatchResult,
    pub roi_boxes: Vec<BoundingBox>,
    pub roi_match: MatchResult,
}

impl SupervisedPass {
    pub fn zero_grads(&self, config: &DetectorConfig) -> HeadGrads {
        HeadGrads::zeros(self.anchors.len(), self.roi_boxes.len(), config.num_classes + 1)
    }

    pub fn losses(
        &self,
        gts: &[Annotation],
        config: &DetectorConfig,
        weights: [f64; 4],
        grads: &mut HeadGrads,
    ) -> SupervisedLosses {
        let inputs = LossInputs {
            rpn: &self.rpn.outputs,
            anchors: &self.anchors.boxes,
            rpn_match: &self.rpn_match,
            roi: &self.roi.outputs,
            roi_boxes: &self.roi_boxes,
            roi_match: &self.roi_match,
        };
        supervised_losses(&inputs, gts, config, weights, grads)
    }
}

/// Predictions of `params` on one image record.
pub fn infer(params: &ParamSet, image: &ImageRecord, config: &DetectorConfig) -> Result<Vec<Prediction>> {
    Detector::new(config, params)?.predict(&image.pixels)
}
