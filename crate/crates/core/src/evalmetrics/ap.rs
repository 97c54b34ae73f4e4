use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::datamodel::boxes::iou_unchecked;
use crate::datamodel::{Annotation, Prediction};
use crate::error::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_ground_truth: usize,
}

impl EvalResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows of `metric,value` with one row per class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"])?;
        w.write_record(["ap50", &self.ap50.to_string()])?;
        for (c, ap) in &self.per_class_ap {
            w.write_record([format!("ap50_class_{c}"), ap.to_string()])?;
        }
        w.write_record(["true_positives", &self.true_positives.to_string()])?;
        w.write_record(["false_positives", &self.false_positives.to_string()])?;
        w.write_record(["num_ground_truth", &self.num_ground_truth.to_string()])?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Area under the monotone precision envelope over recall.
pub(crate) fn all_point_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// AP at IoU 0.5 per class, averaged over classes that have ground truth.
///
/// Images are keyed by id; every prediction id must appear in `ground_truth`.
pub fn ap50(
    predictions: &[(String, Vec<Prediction>)],
    ground_truth: &[(String, Vec<Annotation>)],
    num_classes: usize,
) -> Result<EvalResult> {
    let mut gt_index: HashMap<&str, usize> = HashMap::new();
    for (i, (id, _)) in ground_truth.iter().enumerate() {
        if gt_index.insert(id, i).is_some() {
            return Err(Error::DuplicateImageId(id.clone()));
        }
    }
    let mut seen = HashMap::new();
    for (id, _) in predictions {
        if !gt_index.contains_key(id.as_str()) {
            return Err(Error::InvalidData(format!("predictions for unknown image `{id}`")));
        }
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(Error::DuplicateImageId(id.clone()));
        }
    }

    let mut out = EvalResult::default();
    for c in 0..num_classes {
        let gts: Vec<Vec<&Annotation>> = ground_truth
            .iter()
            .map(|(_, a)| a.iter().filter(|a| a.class_id == c).collect())
            .collect();
        let num_gt: usize = gts.iter().map(Vec::len).sum();
        // (score, image, prediction) in evaluation order
        let mut dets: Vec<(f64, usize, &Prediction)> = predictions
            .iter()
            .flat_map(|(id, ps)| {
                let img = gt_index[id.as_str()];
                ps.iter().filter(|p| p.class_id == c).map(move |p| (p.score, img, p))
            })
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::with_capacity(dets.len());
        for (_, img, p) in &dets {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                if used[*img][j] {
                    continue;
                }
                let v = iou_unchecked(&p.bbox, &g.bbox);
                if v >= IOU_THRESHOLD && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[*img][j] = true;
                    tp.push(true);
                    out.true_positives += 1;
                }
                None => {
                    tp.push(false);
                    out.false_positives += 1;
                }
            }
        }
        out.num_ground_truth += num_gt;
        if num_gt > 0 {
            out.per_class_ap.insert(c, all_point_ap(&tp, num_gt));
        }
    }
    out.ap50 = if out.per_class_ap.is_empty() {
        0.0
    } else {
        out.per_class_ap.values().sum::<f64>() / out.per_class_ap.len() as f64
    };
    Ok(out)
}

/// First step whose value reaches 95% of the final value.
pub fn convergence_time(metric_curve: &[(usize, f64)]) -> Result<usize> {
    let &(last_step, last) = metric_curve
        .last()
        .ok_or_else(|| Error::InvalidData("empty metric curve".into()))?;
    let thr = 0.95 * last;
    Ok(metric_curve
        .iter()
        .find(|(_, v)| *v >= thr)
        .map_or(last_step, |(s, _)| *s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BoundingBox;

    fn bx(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn gt(x: f64) -> Annotation {
        Annotation { bbox: bx(x), class_id: 0 }
    }

    fn pr(x: f64, s: f64) -> Prediction {
        Prediction {
            bbox: bx(x),
            class_id: 0,
            score: s,
        }
    }

    #[test]
    fn single_detection_and_empty() {
        let g = vec![("a".to_string(), vec![gt(0.0)])];
        let p = vec![("a".to_string(), vec![pr(2.0, 0.9)])];
        assert_eq!(ap50(&p, &g, 1).unwrap().ap50, 1.0);
        assert_eq!(ap50(&[], &g, 1).unwrap().ap50, 0.0);
    }

    #[test]
    fn false_positive_first_on_two_gts() {
        let g = vec![("a".to_string(), vec![gt(0.0), gt(50.0)])];
        let p = vec![("a".to_string(), vec![pr(100.0, 0.9), pr(0.0, 0.8), pr(50.0, 0.7)])];
        let r = ap50(&p, &g, 1).unwrap();
        assert!((r.ap50 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((r.true_positives, r.false_positives), (2, 1));
    }

    #[test]
    fn duplicate_ids_error() {
        let g = vec![("a".to_string(), vec![]), ("a".to_string(), vec![])];
        assert!(matches!(ap50(&[], &g, 1), Err(Error::DuplicateImageId(_))));
    }

    #[test]
    fn convergence_examples() {
        let c: Vec<(usize, f64)> = [10.0, 40.0, 60.0, 63.0, 64.0].iter().enumerate().map(|(i, v)| (i + 1, *v)).collect();
        assert_eq!(convergence_time(&c).unwrap(), 4);
        assert_eq!(convergence_time(&[(5, 2.0), (9, 2.0)]).unwrap(), 5);
        assert_eq!(convergence_time(&[(5, 3.0), (9, 0.0)]).unwrap(), 5);
        assert!(convergence_time(&[]).is_err());
    }
}
