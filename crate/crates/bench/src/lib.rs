//! Fixtures shared by the benchmarks.

use daod_core::{Annotation, BoundingBox, Prediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random boxes inside a `size`×`size` image with uniform scores.
pub fn random_boxes(n: usize, size: f64, seed: u64) -> (Vec<BoundingBox>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..size * 0.8), rng.gen_range(0.0..size * 0.8));
            let (w, h) = (rng.gen_range(4.0..size * 0.2), rng.gen_range(4.0..size * 0.2));
            BoundingBox::new(x, y, x + w, y + h).expect("positive extent")
        })
        .collect();
    let scores = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    (boxes, scores)
}

/// Per-image ground truth and noisy detections around it.
#[allow(clippy::type_complexity)]
pub fn detection_set(
    images: usize,
    per_image: usize,
    seed: u64,
) -> (Vec<(String, Vec<Prediction>)>, Vec<(String, Vec<Annotation>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(images);
    let mut gts = Vec::with_capacity(images);
    for i in 0..images {
        let id = format!("img{i}");
        let (boxes, _) = random_boxes(per_image, 96.0, seed ^ i as u64);
        let gt: Vec<Annotation> = boxes
            .iter()
            .map(|b| Annotation {
                bbox: *b,
                class_id: rng.gen_range(0..2),
            })
            .collect();
        let p: Vec<Prediction> = gt
            .iter()
            .flat_map(|a| {
                let jitter: f64 = rng.gen_range(-3.0..3.0);
                let b = &a.bbox;
                [
                    Prediction {
                        bbox: BoundingBox::new(b.x1 + jitter.abs(), b.y1, b.x2 + jitter.abs(), b.y2).expect("valid"),
                        class_id: a.class_id,
                        score: rng.gen_range(0.3..1.0),
                    },
                    Prediction {
                        bbox: BoundingBox::new(b.x1, b.y1 + 6.0, b.x2 + 6.0, b.y2 + 6.0).expect("valid"),
                        class_id: 1 - a.class_id,
                        score: rng.gen_range(0.0..0.6),
                    },
                ]
            })
            .collect();
        preds.push((id.clone(), p));
        gts.push((id, gt));
    }
    (preds, gts)
}
