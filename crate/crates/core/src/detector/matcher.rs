use rand::seq::SliceRandom;

use super::config::DetectorConfig;
use crate::datamodel::boxes::iou_unchecked;
use crate::datamodel::{Annotation, BoundingBox};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Rpn,
    Roi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    Foreground,
    Background,
}

/// Sampled candidates; entry `i` of each field describes `sampled[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub sampled: Vec<usize>,
    pub labels: Vec<MatchLabel>,
    /// Ground-truth index for foreground samples.
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.sampled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sampled.is_empty()
    }

    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|l| **l == MatchLabel::Foreground).count()
    }
}

/// Per-candidate label before sampling: `Some(Some(g))` foreground, `Some(None)`
/// background, `None` ignored.
pub(crate) fn assign_labels(
    candidates: &[BoundingBox],
    gts: &[BoundingBox],
    fg_iou: f64,
    bg_iou: f64,
    low_quality: bool,
) -> Vec<Option<Option<usize>>> {
    if gts.is_empty() {
        return vec![Some(None); candidates.len()];
    }
    let ious: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| gts.iter().map(|g| iou_unchecked(c, g)).collect())
        .collect();
    let mut out: Vec<Option<Option<usize>>> = ious
        .iter()
        .map(|row| {
            let (best, &v) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            if v >= fg_iou {
                Some(Some(best))
            } else if v < bg_iou {
                Some(None)
            } else {
                None
            }
        })
        .collect();
    if low_quality {
        for g in 0..gts.len() {
            let best = ious.iter().map(|r| r[g]).fold(0.0, f64::max);
            if best <= 0.0 {
                continue;
            }
            for (c, row) in ious.iter().enumerate() {
                if row[g] == best && !matches!(out[c], Some(Some(_))) {
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                        .0;
                    out[c] = Some(Some(arg));
                }
            }
        }
    }
    out
}

/// Balanced sampling: at most `floor(n * fg_fraction)` foregrounds, then
/// backgrounds up to `n` in total.
pub(crate) fn balanced_sample(
    labels: &[Option<Option<usize>>],
    n: usize,
    fg_fraction: f64,
    seed: u64,
) -> MatchResult {
    let mut rng = rng_for(seed, &[0x5A3F]);
    let mut fg: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], Some(Some(_)))).collect();
    let mut bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(None)).collect();
    fg.shuffle(&mut rng);
    bg.shuffle(&mut rng);
    let n_fg = fg.len().min((n as f64 * fg_fraction).floor() as usize);
    let n_bg = bg.len().min(n - n_fg);
    fg.truncate(n_fg);
    bg.truncate(n_bg);
    let mut res = MatchResult {
        sampled: Vec::with_capacity(n_fg + n_bg),
        labels: Vec::with_capacity(n_fg + n_bg),
        matched_gt: Vec::with_capacity(n_fg + n_bg),
    };
    for i in fg {
        res.sampled.push(i);
        res.labels.push(MatchLabel::Foreground);
        res.matched_gt.push(labels[i].flatten());
    }
    for i in bg {
        res.sampled.push(i);
        res.labels.push(MatchLabel::Background);
        res.matched_gt.push(None);
    }
    res
}

/// IoU matching of candidates to ground truth followed by balanced sampling.
pub fn match_and_sample(
    candidates: &[BoundingBox],
    gts: &[Annotation],
    stage: Stage,
    config: &DetectorConfig,
    seed: u64,
) -> MatchResult {
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|a| a.bbox).collect();
    let (fg, bg, lq, n, frac) = match stage {
        Stage::Rpn => (
            config.rpn_fg_iou,
            config.rpn_bg_iou,
            config.rpn_low_quality_matches,
            config.rpn_samples,
            config.rpn_fg_fraction,
        ),
        Stage::Roi => (
            config.roi_fg_iou,
            config.roi_bg_iou,
            false,
            config.roi_samples,
            config.roi_fg_fraction,
        ),
    };
    let labels = assign_labels(candidates, &gt_boxes, fg, bg, lq);
    balanced_sample(&labels, n, frac, seed)
}
