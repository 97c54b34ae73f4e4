use super::boxcoder::encode_unchecked;
use super::config::DetectorConfig;
use super::matcher::{MatchLabel, MatchResult};
use super::network::{HeadGrads, RoiOutputs, RpnOutputs};
use crate::datamodel::{Annotation, BoundingBox};
use crate::nn::{log_softmax, sigmoid, smooth_l1, smooth_l1_grad, softmax, softplus};

/// The four standard two-stage detection losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SupervisedLosses {
    pub rpn_objectness: f64,
    pub rpn_regression: f64,
    pub roi_classification: f64,
    pub roi_regression: f64,
}

impl SupervisedLosses {
    pub const NAMES: [&'static str; 4] = ["loss_rpn_obj", "loss_rpn_reg", "loss_roi_cls", "loss_roi_reg"];

    pub fn values(&self) -> [f64; 4] {
        [
            self.rpn_objectness,
            self.rpn_regression,
            self.roi_classification,
            self.roi_regression,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// Detector outputs and the samples they are scored against.
///
/// Row `i` of `roi` and `roi_boxes[i]` belong to entry `i` of `roi_match`;
/// `rpn_match` indexes into `anchors`.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub rpn: &'a RpnOutputs,
    pub anchors: &'a [BoundingBox],
    pub rpn_match: &'a MatchResult,
    pub roi: &'a RoiOutputs,
    pub roi_boxes: &'a [BoundingBox],
    pub roi_match: &'a MatchResult,
}

/// Binary cross-entropy on a logit; returns `(loss, dloss/dlogit)`.
pub(crate) fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    (softplus(z) - target * z, sigmoid(z) - target)
}

/// Summed smooth-L1 over four coordinates with its gradient.
pub(crate) fn smooth_l1_4(pred: &[f64; 4], target: &[f64; 4], beta: f64) -> (f64, [f64; 4]) {
    let mut g = [0.0; 4];
    let mut l = 0.0;
    for j in 0..4 {
        let d = pred[j] - target[j];
        l += smooth_l1(d, beta);
        g[j] = smooth_l1_grad(d, beta);
    }
    (l, g)
}

/// Cross-entropy of `logits` against a full target distribution.
pub(crate) fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let lsm = log_softmax(logits);
    let p = softmax(logits);
    let t_sum: f64 = target.iter().sum();
    let loss = -target.iter().zip(&lsm).map(|(t, l)| t * l).sum::<f64>();
    let grad = p.iter().zip(target).map(|(pi, ti)| t_sum * pi - ti).collect();
    (loss, grad)
}

/// Computes the supervised losses and adds `weights[i] * d(loss_i)` to `grads`.
pub fn supervised_losses(
    inputs: &LossInputs<'_>,
    gts: &[Annotation],
    config: &DetectorConfig,
    weights: [f64; 4],
    grads: &mut HeadGrads,
) -> SupervisedLosses {
    let beta = config.smooth_l1_beta;
    let k = config.num_classes;
    let mut out = SupervisedLosses::default();

    let rm = inputs.rpn_match;
    if !rm.is_empty() {
        let n = rm.len() as f64;
        let n_fg = rm.num_foreground();
        for s in 0..rm.len() {
            let a = rm.sampled[s];
            let fg = rm.labels[s] == MatchLabel::Foreground;
            let (l, g) = bce_with_logit(inputs.rpn.objectness_logits[a], if fg { 1.0 } else { 0.0 });
            out.rpn_objectness += l / n;
            grads.objectness[a] += weights[0] * g / n;
            if let (true, Some(gi)) = (fg, rm.matched_gt[s]) {
                let target = encode_unchecked(&inputs.anchors[a], &gts[gi].bbox);
                let (l, g) = smooth_l1_4(&inputs.rpn.box_deltas[a], &target, beta);
                out.rpn_regression += l / n_fg as f64;
                for j in 0..4 {
                    grads.rpn_deltas[a][j] += weights[1] * g[j] / n_fg as f64;
                }
            }
        }
    }

    let qm = inputs.roi_match;
    if !qm.is_empty() {
        let n = qm.len() as f64;
        let n_fg = qm.num_foreground() as f64;
        for i in 0..qm.len() {
            let logits = &inputs.roi.class_logits[i];
            let gt = match (qm.labels[i], qm.matched_gt[i]) {
                (MatchLabel::Foreground, Some(g)) => Some(g),
                _ => None,
            };
            let label = gt.map_or(k, |g| gts[g].class_id);
            let lsm = log_softmax(logits);
            let p = softmax(logits);
            out.roi_classification -= lsm[label] / n;
            for (c, pc) in p.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grads.class_logits[i][c] += weights[2] * (pc - onehot) / n;
            }
            if let Some(g) = gt {
                let target = encode_unchecked(&inputs.roi_boxes[i], &gts[g].bbox);
                let (l, gr) = smooth_l1_4(&inputs.roi.box_deltas[i], &target, beta);
                out.roi_regression += l / n_fg;
                for j in 0..4 {
                    grads.roi_deltas[i][j] += weights[3] * gr[j] / n_fg;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let cfg = DetectorConfig {
            num_classes: 2,
            ..Default::default()
        };
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let rpn = RpnOutputs {
            objectness_logits: vec![],
            box_deltas: vec![],
        };
        let roi = RoiOutputs {
            class_logits: vec![vec![0.3; 3]; 2],
            box_deltas: vec![[0.0; 4]; 2],
        };
        let empty = MatchResult {
            sampled: vec![],
            labels: vec![],
            matched_gt: vec![],
        };
        let qm = MatchResult {
            sampled: vec![0, 1],
            labels: vec![MatchLabel::Background; 2],
            matched_gt: vec![None; 2],
        };
        let mut g = HeadGrads::zeros(0, 2, 3);
        let l = supervised_losses(
            &LossInputs {
                rpn: &rpn,
                anchors: &[],
                rpn_match: &empty,
                roi: &roi,
                roi_boxes: &[b, b],
                roi_match: &qm,
            },
            &[],
            &cfg,
            [1.0; 4],
            &mut g,
        );
        assert!((l.roi_classification - 3f64.ln()).abs() < 1e-12);
        assert_eq!(l.rpn_regression, 0.0);
        assert_eq!(l.roi_regression, 0.0);
    }

    #[test]
    fn soft_cross_entropy_matches_hard_on_one_hot() {
        let z = [0.2, -1.0, 0.7];
        let (l, g) = soft_cross_entropy(&z, &[0.0, 1.0, 0.0]);
        assert!((l + log_softmax(&z)[1]).abs() < 1e-12);
        let p = softmax(&z);
        assert!((g[1] - (p[1] - 1.0)).abs() < 1e-12);
    }
}
