//! Teacher-side targets and distillation losses.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, BoundingBox, Image, Prediction};
use crate::detector::{
    balanced_sample, batched_nms, bce_with_logit, smooth_l1_4, soft_cross_entropy, supervised_losses, BackboneOut,
    Detector, DetectorConfig, HeadGrads, LossInputs, RoiOutputs, RpnOut, RpnOutputs, SupervisedLosses,
};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.999,
            enabled: true,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("ema.alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Hard pseudo-label score threshold.
    pub confidence_threshold: f64,
    pub nms_iou: f64,
    /// Teacher objectness needed for RPN regression distillation.
    pub objectness_gate: f64,
    pub temperature_obj: f64,
    pub temperature_cls: f64,
    /// Weights of the RPN regression, objectness, ROI regression and
    /// classification terms.
    pub lambdas: [f64; 4],
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Soft,
            confidence_threshold: 0.8,
            nms_iou: 0.5,
            objectness_gate: 0.8,
            temperature_obj: 1.0,
            temperature_cls: 1.0,
            lambdas: [1.0; 4],
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("confidence_threshold", self.confidence_threshold),
            ("nms_iou", self.nms_iou),
            ("objectness_gate", self.objectness_gate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("distill.{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.temperature_obj > 0.0 && self.temperature_cls > 0.0) {
            return Err(Error::Config("distill temperatures must be positive".into()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("distill.lambdas must be non-negative".into()));
        }
        Ok(())
    }
}

/// `alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, alpha: f64) -> Result<ParamSet> {
    teacher.lincomb(alpha, student, 1.0 - alpha)
}

/// Per-class NMS followed by a score threshold.
pub fn hard_pseudo_labels(teacher_preds: &[Prediction], threshold: f64, nms_iou: f64) -> Vec<Annotation> {
    let boxes: Vec<BoundingBox> = teacher_preds.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = teacher_preds.iter().map(|p| p.score).collect();
    let classes: Vec<usize> = teacher_preds.iter().map(|p| p.class_id).collect();
    batched_nms(&boxes, &scores, &classes, nms_iou)
        .into_iter()
        .filter(|&i| scores[i] >= threshold)
        .map(|i| Annotation {
            bbox: boxes[i],
            class_id: classes[i],
        })
        .collect()
}

/// Teacher activations on the weak view of one image.
#[derive(Clone, Debug)]
pub struct TeacherView {
    backbone: BackboneOut,
    rpn: RpnOut,
}

impl TeacherView {
    pub fn new(teacher: &Detector<'_>, weak: &Image) -> Result<Self> {
        let backbone = teacher.backbone(weak)?;
        let rpn = teacher.rpn(&backbone)?;
        Ok(Self { backbone, rpn })
    }

    pub fn num_anchors(&self) -> usize {
        self.rpn.outputs.objectness_logits.len()
    }

    pub fn rpn_outputs(&self) -> &RpnOutputs {
        &self.rpn.outputs
    }

    /// Sigmoid of objectness logits divided by `temperature`.
    pub fn objectness_probs(&self, temperature: f64) -> Vec<f64> {
        self.rpn.outputs.objectness_logits.iter().map(|&z| sigmoid(z / temperature)).collect()
    }
}

/// Anchor sample for soft distillation: anchors the teacher scores at or
/// above `gate` count as foreground in the usual balanced sampler.
pub fn sample_distill_anchors(teacher_probs: &[f64], gate: f64, config: &DetectorConfig, seed: u64) -> Vec<usize> {
    let labels: Vec<Option<Option<usize>>> = teacher_probs
        .iter()
        .map(|&p| if p >= gate { Some(Some(0)) } else { Some(None) })
        .collect();
    balanced_sample(&labels, config.rpn_samples, config.rpn_fg_fraction, seed).sampled
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    pub anchor_indices: Vec<usize>,
    pub rpn_objectness: Vec<f64>,
    pub rpn_deltas: Vec<[f64; 4]>,
    pub roi_class_dist: Vec<Vec<f64>>,
    pub roi_deltas: Vec<[f64; 4]>,
}

/// Teacher targets at the student's sampled anchors and on the student's proposals.
pub fn build_soft_targets(
    teacher: &Detector<'_>,
    view: &TeacherView,
    anchor_indices: &[usize],
    student_num_anchors: usize,
    proposals: &[BoundingBox],
    config: &DistillConfig,
) -> Result<DistillTargets> {
    if view.num_anchors() != student_num_anchors {
        return Err(Error::DimensionMismatch(format!(
            "teacher has {} anchors, student has {student_num_anchors}",
            view.num_anchors()
        )));
    }
    if let Some(&bad) = anchor_indices.iter().find(|&&i| i >= student_num_anchors) {
        return Err(Error::DimensionMismatch(format!("anchor index {bad} out of range")));
    }
    let rpn = &view.rpn.outputs;
    let roi = teacher.roi(&view.backbone, proposals)?;
    Ok(DistillTargets {
        anchor_indices: anchor_indices.to_vec(),
        rpn_objectness: anchor_indices
            .iter()
            .map(|&i| sigmoid(rpn.objectness_logits[i] / config.temperature_obj))
            .collect(),
        rpn_deltas: anchor_indices.iter().map(|&i| rpn.box_deltas[i]).collect(),
        roi_class_dist: roi
            .outputs
            .class_logits
            .iter()
            .map(|z| softmax(&z.iter().map(|v| v / config.temperature_cls).collect::<Vec<_>>()))
            .collect(),
        roi_deltas: roi.outputs.box_deltas,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SoftDistillLosses {
    pub rpn: f64,
    pub obj: f64,
    pub roih: f64,
    pub cls: f64,
    pub total: f64,
}

impl SoftDistillLosses {
    pub const NAMES: [&'static str; 4] = ["distill_rpn", "distill_obj", "distill_roih", "distill_cls"];

    pub fn values(&self) -> [f64; 4] {
        [self.rpn, self.obj, self.roih, self.cls]
    }
}

/// Soft distillation losses; adds `scale * dL_distill` to `grads`.
pub fn soft_distill_losses(
    rpn: &RpnOutputs,
    roi: &RoiOutputs,
    targets: &DistillTargets,
    config: &DistillConfig,
    detector: &DetectorConfig,
    scale: f64,
    grads: &mut HeadGrads,
) -> Result<SoftDistillLosses> {
    let t = targets;
    if roi.class_logits.len() != t.roi_class_dist.len() || t.rpn_objectness.len() != t.anchor_indices.len() {
        return Err(Error::DimensionMismatch(format!(
            "student has {} proposals, targets cover {}",
            roi.class_logits.len(),
            t.roi_class_dist.len()
        )));
    }
    let [l0, l1, l2, l3] = config.lambdas;
    let beta = detector.smooth_l1_beta;
    let mut out = SoftDistillLosses::default();

    let n = t.anchor_indices.len();
    let gated: Vec<usize> = (0..n).filter(|&s| t.rpn_objectness[s] >= config.objectness_gate).collect();
    for (s, &a) in t.anchor_indices.iter().enumerate() {
        let (l, g) = bce_with_logit(rpn.objectness_logits[a], t.rpn_objectness[s]);
        out.obj += l / n as f64;
        grads.objectness[a] += scale * l1 * g / n as f64;
    }
    for &s in &gated {
        let a = t.anchor_indices[s];
        let (l, g) = smooth_l1_4(&rpn.box_deltas[a], &t.rpn_deltas[s], beta);
        out.rpn += l / gated.len() as f64;
        for j in 0..4 {
            grads.rpn_deltas[a][j] += scale * l0 * g[j] / gated.len() as f64;
        }
    }

    let m = roi.class_logits.len();
    let foreground: Vec<usize> = (0..m)
        .filter(|&i| {
            let d = &t.roi_class_dist[i];
            let arg = (0..d.len()).fold(0, |b, c| if d[c] > d[b] { c } else { b });
            arg != d.len() - 1
        })
        .collect();
    for i in 0..m {
        let (l, g) = soft_cross_entropy(&roi.class_logits[i], &t.roi_class_dist[i]);
        out.cls += l / m as f64;
        for (gc, v) in grads.class_logits[i].iter_mut().zip(g) {
            *gc += scale * l3 * v / m as f64;
        }
    }
    for &i in &foreground {
        let (l, g) = smooth_l1_4(&roi.box_deltas[i], &t.roi_deltas[i], beta);
        out.roih += l / foreground.len() as f64;
        for j in 0..4 {
            grads.roi_deltas[i][j] += scale * l2 * g[j] / foreground.len() as f64;
        }
    }
    out.total = l0 * out.rpn + l1 * out.obj + l2 * out.roih + l3 * out.cls;
    Ok(out)
}

/// Supervised detection losses against pseudo-labels.
pub fn hard_distill_losses(
    inputs: &LossInputs<'_>,
    pseudo_labels: &[Annotation],
    config: &DetectorConfig,
    weights: [f64; 4],
    grads: &mut HeadGrads,
) -> SupervisedLosses {
    supervised_losses(inputs, pseudo_labels, config, weights, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn ema_examples() {
        let (t, s) = (one(1.0), one(0.0));
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert!((ema_update(&t, &s, 0.9).unwrap().tensors()[0].data[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ema_mismatch_names_array() {
        let mut other = ParamSet::new();
        other.push("v", Tensor::zeros(&[1]));
        let err = ema_update(&one(1.0), &other, 0.5).unwrap_err();
        assert!(err.to_string().contains('w') || err.to_string().contains('v'));
    }

    fn pred(x: f64, score: f64) -> Prediction {
        Prediction {
            bbox: BoundingBox::new(x, 0.0, x + 5.0, 5.0).unwrap(),
            class_id: 0,
            score,
        }
    }

    #[test]
    fn pseudo_label_thresholds() {
        let preds = [pred(0.0, 0.9), pred(10.0, 0.85), pred(20.0, 0.79)];
        assert_eq!(hard_pseudo_labels(&preds, 0.8, 0.5).len(), 2);
        assert_eq!(hard_pseudo_labels(&preds, 0.0, 0.5).len(), 3);
    }

    #[test]
    fn temperature_softmax_example() {
        let p = softmax(&[2.0 / 2.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4);
    }
}
