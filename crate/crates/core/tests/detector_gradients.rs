//! Analytic detector gradients against central finite differences.

use daod_core::detector::{
    init_params, supervised_losses, Detector, DetectorConfig, HeadGrads, LossInputs, SupervisedPass,
};
use daod_core::{Annotation, BoundingBox, Image, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        input_channels: 3,
        backbone_channels: vec![4, 5],
        feature_stride: 4,
        rpn_channels: 4,
        anchor_sizes: vec![8.0, 12.0],
        anchor_aspect_ratios: vec![1.0],
        num_classes: 2,
        rpn_samples: 24,
        roi_samples: 16,
        roi_fg_fraction: 0.5,
        train_proposals: 12,
        roi_pool_size: 2,
        roi_hidden: 6,
        ..Default::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    Image::new(h, w, 3, data).unwrap()
}

fn random_gts(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Annotation> {
    (0..2)
        .map(|i| {
            let bw = rng.gen_range(6.0..12.0);
            let bh = rng.gen_range(6.0..12.0);
            let x = rng.gen_range(0.0..w as f64 - bw);
            let y = rng.gen_range(0.0..h as f64 - bh);
            Annotation {
                bbox: BoundingBox::new(x, y, x + bw, y + bh).unwrap(),
                class_id: i % 2,
            }
        })
        .collect()
}

/// Loss with proposals and samples frozen at `pass`.
fn frozen_loss(
    cfg: &DetectorConfig,
    params: &ParamSet,
    image: &Image,
    pass: &SupervisedPass,
    gts: &[Annotation],
    weights: [f64; 4],
) -> f64 {
    let det = Detector::new(cfg, params).unwrap();
    let bb = det.backbone(image).unwrap();
    let rpn = det.rpn(&bb).unwrap();
    let roi = det.roi(&bb, &pass.roi_boxes).unwrap();
    let mut g = HeadGrads::zeros(pass.anchors.len(), pass.roi_boxes.len(), cfg.num_classes + 1);
    let inputs = LossInputs {
        rpn: &rpn.outputs,
        anchors: &pass.anchors.boxes,
        rpn_match: &pass.rpn_match,
        roi: &roi.outputs,
        roi_boxes: &pass.roi_boxes,
        roi_match: &pass.roi_match,
    };
    let l = supervised_losses(&inputs, gts, cfg, weights, &mut g);
    l.values().iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Relative error `|a - b| / (|a| + |b|)` per parameter array, on the vector norm.
pub fn worst_relative_error(analytic: &ParamSet, numeric: &ParamSet) -> (String, f64) {
    let mut worst = (String::new(), 0.0);
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        let diff: f64 = a.data.iter().zip(&n.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
            + n.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        if rel > worst.1 {
            worst = (name.to_string(), rel);
        }
    }
    worst
}

pub fn numeric_gradient(params: &ParamSet, f: impl Fn(&ParamSet) -> f64) -> ParamSet {
    let eps = 1e-6;
    let mut out = params.zeros_like();
    let mut p = params.clone();
    for t in 0..params.len() {
        for i in 0..params.tensors()[t].len() {
            let orig = p.tensors()[t].data[i];
            p.tensors_mut()[t].data[i] = orig + eps;
            let up = f(&p);
            p.tensors_mut()[t].data[i] = orig - eps;
            let down = f(&p);
            p.tensors_mut()[t].data[i] = orig;
            out.tensors_mut()[t].data[i] = (up - down) / (2.0 * eps);
        }
    }
    out
}

#[test]
fn supervised_losses_match_finite_differences() {
    let cfg = tiny_config();
    let (h, w) = (20, 24);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = init_params(&cfg, seed).unwrap();
        // larger head weights so every branch carries signal
        let mut params = params;
        for t in params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= 3.0);
        }
        let image = random_image(&mut rng, h, w);
        let gts = random_gts(&mut rng, h, w);
        let det = Detector::new(&cfg, &params).unwrap();
        let pass = det.supervised_pass(&image, &gts, seed).unwrap();
        assert!(pass.rpn_match.num_foreground() > 0 && pass.roi_match.num_foreground() > 0);
        for term in 0..4 {
            let mut weights = [0.0; 4];
            weights[term] = 1.0;
            let mut hg = pass.zero_grads(&cfg);
            pass.losses(&gts, &cfg, weights, &mut hg);
            let mut analytic = params.zeros_like();
            det.backward(&pass.backbone, &pass.rpn, &pass.roi, &hg, &mut analytic);
            let numeric = numeric_gradient(&params, |p| frozen_loss(&cfg, p, &image, &pass, &gts, weights));
            let (name, rel) = worst_relative_error(&analytic, &numeric);
            assert!(rel <= 1e-4, "seed {seed} term {term}: {name} relative error {rel:e}");
            assert!(analytic.l2_norm() > 0.0);
        }
    }
}

#[test]
fn external_feature_and_hidden_gradients_backpropagate() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = init_params(&cfg, 3).unwrap();
    let image = random_image(&mut rng, 16, 16);
    let gts = random_gts(&mut rng, 16, 16);
    let det = Detector::new(&cfg, &params).unwrap();
    let pass = det.supervised_pass(&image, &gts, 1).unwrap();
    let fw: Vec<f64> = (0..pass.backbone.features().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hw: Vec<Vec<f64>> = pass.roi.hidden.iter().map(|h| h.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut hg = HeadGrads::default();
    hg.features = fw.clone();
    hg.roi_hidden = hw.clone();
    let mut analytic = params.zeros_like();
    det.backward(&pass.backbone, &pass.rpn, &pass.roi, &hg, &mut analytic);
    let numeric = numeric_gradient(&params, |p| {
        let d = Detector::new(&cfg, p).unwrap();
        let bb = d.backbone(&image).unwrap();
        let roi = d.roi(&bb, &pass.roi_boxes).unwrap();
        let a: f64 = bb.features().iter().zip(&fw).map(|(x, y)| x * y).sum();
        let b: f64 = roi
            .hidden
            .iter()
            .zip(&hw)
            .map(|(h, g)| h.iter().zip(g).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        a + b
    });
    let (name, rel) = worst_relative_error(&analytic, &numeric);
    assert!(rel <= 1e-4, "{name} relative error {rel:e}");
}
