use crate::datamodel::boxes::iou_unchecked;
use crate::datamodel::BoundingBox;

/// Indices sorted by score descending; ties resolved by lower index.
pub(crate) fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in score order.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut keep: Vec<usize> = Vec::new();
    for i in argsort_desc(scores) {
        if keep.iter().all(|&k| iou_unchecked(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// NMS applied independently within each class label.
pub fn batched_nms(boxes: &[BoundingBox], scores: &[f64], classes: &[usize], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), classes.len(), "batched_nms: boxes and classes differ in length");
    let mut keep: Vec<usize> = Vec::new();
    for i in argsort_desc(scores) {
        if keep
            .iter()
            .all(|&k| classes[k] != classes[i] || iou_unchecked(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn suppresses_overlaps_keeps_separate() {
        let boxes = [bx(0.0, 0.0, 10.0, 10.0), bx(1.0, 0.0, 11.0, 10.0), bx(30.0, 30.0, 40.0, 40.0)];
        assert_eq!(nms(&boxes, &[0.8, 0.9, 0.1], 0.5), vec![1, 2]);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(batched_nms(&[b, b], &[0.9, 0.8], &[0, 1], 0.5), vec![0, 1]);
        assert_eq!(batched_nms(&[b, b], &[0.9, 0.8], &[1, 1], 0.5), vec![0]);
    }

    proptest! {
        #[test]
        fn kept_boxes_are_mutually_separated(
            raw in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..20.0, 1.0f64..20.0, 0.0f64..1.0), 0..30),
            thr in 0.1f64..0.9,
        ) {
            let boxes: Vec<BoundingBox> = raw.iter().map(|r| bx(r.0, r.1, r.0 + r.2, r.1 + r.3)).collect();
            let scores: Vec<f64> = raw.iter().map(|r| r.4).collect();
            let keep = nms(&boxes, &scores, thr);
            for (i, &a) in keep.iter().enumerate() {
                for &b in &keep[i + 1..] {
                    prop_assert!(iou_unchecked(&boxes[a], &boxes[b]) <= thr);
                }
            }
            // every dropped box overlaps some kept box with a higher or equal score
            for j in 0..boxes.len() {
                if !keep.contains(&j) {
                    prop_assert!(keep.iter().any(|&k| iou_unchecked(&boxes[k], &boxes[j]) > thr && scores[k] >= scores[j]));
                }
            }
        }
    }
}
