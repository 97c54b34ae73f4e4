use rand::Rng;

use super::anchors::AnchorGrid;
use super::boxcoder::decode_unchecked;
use super::config::DetectorConfig;
use super::nms::{argsort_desc, nms};
use crate::datamodel::{BoundingBox, Image};
use crate::error::{Error, Result};
use crate::nn::{self, ConvShape, RoiSampling};
use crate::params::{ParamSet, Tensor};
use crate::rng::rng_for;

/// Output scale for the last layer of each head.
const HEAD_INIT: f64 = 0.01;

/// Expected parameter names and shapes, in storage order.
pub fn param_layout(config: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = config.input_channels;
    for (i, &c) in config.backbone_channels.iter().enumerate() {
        out.push((format!("backbone.conv{i}.weight"), vec![c, c_in, 3, 3]));
        out.push((format!("backbone.conv{i}.bias"), vec![c]));
        c_in = c;
    }
    let a = config.anchors_per_cell();
    let r = config.rpn_channels;
    out.push(("rpn.conv.weight".into(), vec![r, c_in, 3, 3]));
    out.push(("rpn.conv.bias".into(), vec![r]));
    out.push(("rpn.objectness.weight".into(), vec![a, r, 1, 1]));
    out.push(("rpn.objectness.bias".into(), vec![a]));
    out.push(("rpn.deltas.weight".into(), vec![4 * a, r, 1, 1]));
    out.push(("rpn.deltas.bias".into(), vec![4 * a]));
    let hid = config.roi_hidden;
    out.push(("roi.fc.weight".into(), vec![hid, config.roi_input_len()]));
    out.push(("roi.fc.bias".into(), vec![hid]));
    out.push(("roi.cls.weight".into(), vec![config.num_classes + 1, hid]));
    out.push(("roi.cls.bias".into(), vec![config.num_classes + 1]));
    out.push(("roi.bbox.weight".into(), vec![4, hid]));
    out.push(("roi.bbox.bias".into(), vec![4]));
    out
}

/// Seeded fan-in uniform initialization; head output layers start small.
pub fn init_params(config: &DetectorConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut ps = ParamSet::new();
    for (i, (name, shape)) in param_layout(config).into_iter().enumerate() {
        let mut t = Tensor::zeros(&shape);
        if name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let head = ["rpn.objectness", "rpn.deltas", "roi.cls", "roi.bbox"]
                .iter()
                .any(|p| name.starts_with(p));
            let bound = if head {
                HEAD_INIT * 3f64.sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let mut rng = rng_for(seed, &[0x1417, i as u64]);
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        ps.push(name, t);
    }
    Ok(ps)
}

/// Positions of each layer inside a detector [`ParamSet`].
#[derive(Clone, Copy, Debug)]
struct Slots {
    layers: usize,
}

impl Slots {
    fn conv(&self, i: usize) -> (usize, usize) {
        (2 * i, 2 * i + 1)
    }
    fn rpn_conv(&self) -> usize {
        2 * self.layers
    }
    fn rpn_obj(&self) -> usize {
        2 * self.layers + 2
    }
    fn rpn_deltas(&self) -> usize {
        2 * self.layers + 4
    }
    fn roi_fc(&self) -> usize {
        2 * self.layers + 6
    }
    fn roi_cls(&self) -> usize {
        2 * self.layers + 8
    }
    fn roi_bbox(&self) -> usize {
        2 * self.layers + 10
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutputs {
    pub objectness_logits: Vec<f64>,
    pub box_deltas: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiOutputs {
    /// `K + 1` logits per proposal; index `K` is background.
    pub class_logits: Vec<Vec<f64>>,
    pub box_deltas: Vec<[f64; 4]>,
}

/// Backbone activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneOut {
    input: Vec<f64>,
    in_h: usize,
    in_w: usize,
    /// Post-ReLU output of each layer with its spatial size.
    acts: Vec<(Vec<f64>, usize, usize)>,
    pub image_h: usize,
    pub image_w: usize,
}

impl BackboneOut {
    /// Final feature map, channel-first.
    pub fn features(&self) -> &[f64] {
        &self.acts.last().expect("backbone has layers").0
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        let l = self.acts.last().expect("backbone has layers");
        (l.1, l.2)
    }

    /// Per-channel spatial mean of the final feature map.
    pub fn pooled(&self) -> Vec<f64> {
        let (h, w) = self.feature_hw();
        self.features().chunks(h * w).map(|c| c.iter().sum::<f64>() / (h * w) as f64).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RpnOut {
    hidden: Vec<f64>,
    pub outputs: RpnOutputs,
}

#[derive(Clone, Debug)]
pub struct RoiOut {
    samplings: Vec<RoiSampling>,
    pooled: Vec<Vec<f64>>,
    /// Post-ReLU hidden layer per proposal.
    pub hidden: Vec<Vec<f64>>,
    pub outputs: RoiOutputs,
}

/// Upstream gradients at the detector outputs. Empty vectors mean zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadGrads {
    pub objectness: Vec<f64>,
    pub rpn_deltas: Vec<[f64; 4]>,
    pub class_logits: Vec<Vec<f64>>,
    pub roi_deltas: Vec<[f64; 4]>,
    pub roi_hidden: Vec<Vec<f64>>,
    /// Gradient with respect to the final backbone feature map.
    pub features: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros(num_anchors: usize, num_rois: usize, num_logits: usize) -> Self {
        Self {
            objectness: vec![0.0; num_anchors],
            rpn_deltas: vec![[0.0; 4]; num_anchors],
            class_logits: vec![vec![0.0; num_logits]; num_rois],
            roi_deltas: vec![[0.0; 4]; num_rois],
            roi_hidden: Vec::new(),
            features: Vec::new(),
        }
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// A detector bound to one parameter snapshot.
#[derive(Clone, Copy, Debug)]
pub struct Detector<'a> {
    pub config: &'a DetectorConfig,
    pub params: &'a ParamSet,
    slots: Slots,
}

impl<'a> Detector<'a> {
    pub fn new(config: &'a DetectorConfig, params: &'a ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        if layout.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "detector expects {} parameter arrays, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, t)) in layout.iter().zip(params.iter()) {
            if name != pn || *shape != t.shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
        }
        Ok(Self {
            config,
            params,
            slots: Slots {
                layers: config.backbone_channels.len(),
            },
        })
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params.tensors()[i].data
    }

    fn conv_shape(&self, i: usize) -> ConvShape {
        let c_in = if i == 0 {
            self.config.input_channels
        } else {
            self.config.backbone_channels[i - 1]
        };
        ConvShape {
            c_in,
            c_out: self.config.backbone_channels[i],
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn rpn_shapes(&self) -> (ConvShape, ConvShape, ConvShape) {
        let r = self.config.rpn_channels;
        let a = self.config.anchors_per_cell();
        let conv = ConvShape {
            c_in: self.config.feature_channels(),
            c_out: r,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let one = |c_out| ConvShape {
            c_in: r,
            c_out,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        (conv, one(a), one(4 * a))
    }

    pub fn backbone(&self, image: &Image) -> Result<BackboneOut> {
        if image.channels != self.config.input_channels {
            return Err(Error::DimensionMismatch(format!(
                "image has {} channels, detector expects {}",
                image.channels, self.config.input_channels
            )));
        }
        let s = self.config.feature_stride;
        let (h, w) = (image.height, image.width);
        let (in_h, in_w) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
        let mut input = vec![0.0; image.channels * in_h * in_w];
        let (mean, inv_std) = (self.config.pixel_mean, 1.0 / self.config.pixel_std);
        for c in 0..image.channels {
            for y in 0..h {
                for x in 0..w {
                    input[(c * in_h + y) * in_w + x] = (image.get(y, x, c) - mean) * inv_std;
                }
            }
        }
        check_finite("input", &input)?;
        let mut acts = Vec::with_capacity(self.config.backbone_channels.len());
        for i in 0..self.config.backbone_channels.len() {
            let (prev, ph, pw) = match acts.last() {
                Some((a, ah, aw)) => (a as &Vec<f64>, *ah, *aw),
                None => (&input, in_h, in_w),
            };
            let (wi, bi) = self.slots.conv(i);
            let (mut out, oh, ow) = nn::conv2d_forward(&self.conv_shape(i), prev, ph, pw, self.p(wi), self.p(bi));
            nn::relu_inplace(&mut out);
            check_finite(&format!("backbone.conv{i}"), &out)?;
            acts.push((out, oh, ow));
        }
        Ok(BackboneOut {
            input,
            in_h,
            in_w,
            acts,
            image_h: h,
            image_w: w,
        })
    }

    pub fn rpn(&self, bb: &BackboneOut) -> Result<RpnOut> {
        let (conv, obj, del) = self.rpn_shapes();
        let (fh, fw) = bb.feature_hw();
        let s = &self.slots;
        let (mut hidden, _, _) = nn::conv2d_forward(&conv, bb.features(), fh, fw, self.p(s.rpn_conv()), self.p(s.rpn_conv() + 1));
        nn::relu_inplace(&mut hidden);
        check_finite("rpn.conv", &hidden)?;
        let (o, _, _) = nn::conv2d_forward(&obj, &hidden, fh, fw, self.p(s.rpn_obj()), self.p(s.rpn_obj() + 1));
        let (d, _, _) = nn::conv2d_forward(&del, &hidden, fh, fw, self.p(s.rpn_deltas()), self.p(s.rpn_deltas() + 1));
        check_finite("rpn.objectness", &o)?;
        check_finite("rpn.deltas", &d)?;
        let a = self.config.anchors_per_cell();
        let hw = fh * fw;
        let mut logits = Vec::with_capacity(hw * a);
        let mut deltas = Vec::with_capacity(hw * a);
        for cell in 0..hw {
            for k in 0..a {
                logits.push(o[k * hw + cell]);
                let mut dv = [0.0; 4];
                for (j, v) in dv.iter_mut().enumerate() {
                    *v = d[(4 * k + j) * hw + cell];
                }
                deltas.push(dv);
            }
        }
        Ok(RpnOut {
            hidden,
            outputs: RpnOutputs {
                objectness_logits: logits,
                box_deltas: deltas,
            },
        })
    }

    /// Decoded, clipped anchors ranked by objectness, then NMS and top-`count`.
    pub fn proposals(
        &self,
        rpn: &RpnOutputs,
        anchors: &AnchorGrid,
        image_h: usize,
        image_w: usize,
        count: usize,
    ) -> Vec<BoundingBox> {
        let bounds = Some((image_w as f64, image_h as f64));
        let min = self.config.min_proposal_size;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for i in argsort_desc(&rpn.objectness_logits) {
            if boxes.len() >= self.config.pre_nms_proposals {
                break;
            }
            let b = decode_unchecked(&anchors.boxes[i], &rpn.box_deltas[i], bounds);
            if b.width() >= min && b.height() >= min {
                boxes.push(b);
                scores.push(rpn.objectness_logits[i]);
            }
        }
        let mut keep = nms(&boxes, &scores, self.config.proposal_nms_iou);
        keep.truncate(count);
        keep.into_iter().map(|i| boxes[i]).collect()
    }

    pub fn roi(&self, bb: &BackboneOut, boxes: &[BoundingBox]) -> Result<RoiOut> {
        let (fh, fw) = bb.feature_hw();
        let c = self.config.feature_channels();
        let scale = 1.0 / self.config.feature_stride as f64;
        let s = &self.slots;
        let (pool, ratio) = (self.config.roi_pool_size, self.config.roi_sampling_ratio);
        let mut out = RoiOut {
            samplings: Vec::with_capacity(boxes.len()),
            pooled: Vec::with_capacity(boxes.len()),
            hidden: Vec::with_capacity(boxes.len()),
            outputs: RoiOutputs {
                class_logits: Vec::with_capacity(boxes.len()),
                box_deltas: Vec::with_capacity(boxes.len()),
            },
        };
        for b in boxes {
            let smp = RoiSampling::new(b, scale, fh, fw, pool, ratio);
            let pooled = smp.forward(bb.features(), c, fh, fw);
            let mut hidden = nn::linear_forward(&pooled, self.p(s.roi_fc()), self.p(s.roi_fc() + 1));
            nn::relu_inplace(&mut hidden);
            check_finite("roi.fc", &hidden)?;
            let logits = nn::linear_forward(&hidden, self.p(s.roi_cls()), self.p(s.roi_cls() + 1));
            check_finite("roi.cls", &logits)?;
            let d = nn::linear_forward(&hidden, self.p(s.roi_bbox()), self.p(s.roi_bbox() + 1));
            check_finite("roi.bbox", &d)?;
            out.samplings.push(smp);
            out.pooled.push(pooled);
            out.hidden.push(hidden);
            out.outputs.class_logits.push(logits);
            out.outputs.box_deltas.push([d[0], d[1], d[2], d[3]]);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for the given output gradients into `grads`.
    pub fn backward(&self, bb: &BackboneOut, rpn: &RpnOut, roi: &RoiOut, g: &HeadGrads, grads: &mut ParamSet) {
        let s = self.slots;
        let (fh, fw) = bb.feature_hw();
        let c = self.config.feature_channels();
        let mut d_feat = if g.features.is_empty() {
            vec![0.0; c * fh * fw]
        } else {
            g.features.clone()
        };
        let gt = grads.tensors_mut();

        // ROI heads
        let hid = self.config.roi_hidden;
        let k1 = self.config.num_classes + 1;
        for i in 0..roi.hidden.len() {
            let mut d_hidden = match g.roi_hidden.get(i) {
                Some(v) if !v.is_empty() => v.clone(),
                _ => vec![0.0; hid],
            };
            let dl = g.class_logits.get(i).filter(|v| !v.is_empty());
            let dd = g.roi_deltas.get(i);
            let any = d_hidden.iter().any(|v| *v != 0.0)
                || dl.is_some_and(|v| v.iter().any(|x| *x != 0.0))
                || dd.is_some_and(|v| v.iter().any(|x| *x != 0.0));
            if !any {
                continue;
            }
            let h = &roi.hidden[i];
            if let Some(dl) = dl {
                debug_assert_eq!(dl.len(), k1);
                let (w, b) = split2(gt, s.roi_cls());
                nn::linear_backward(h, self.p(s.roi_cls()), dl, w, b, Some(&mut d_hidden));
            }
            if let Some(dd) = dd {
                let (w, b) = split2(gt, s.roi_bbox());
                nn::linear_backward(h, self.p(s.roi_bbox()), dd, w, b, Some(&mut d_hidden));
            }
            nn::relu_backward_inplace(h, &mut d_hidden);
            let mut d_pooled = vec![0.0; roi.pooled[i].len()];
            let (w, b) = split2(gt, s.roi_fc());
            nn::linear_backward(&roi.pooled[i], self.p(s.roi_fc()), &d_hidden, w, b, Some(&mut d_pooled));
            roi.samplings[i].backward(&d_pooled, c, fh, fw, &mut d_feat);
        }

        // RPN
        let a = self.config.anchors_per_cell();
        let hw = fh * fw;
        let rpn_active = g.objectness.iter().any(|v| *v != 0.0)
            || g.rpn_deltas.iter().any(|v| v.iter().any(|x| *x != 0.0));
        if rpn_active {
            let (conv, obj, del) = self.rpn_shapes();
            let mut d_o = vec![0.0; a * hw];
            let mut d_d = vec![0.0; 4 * a * hw];
            for cell in 0..hw {
                for k in 0..a {
                    let idx = cell * a + k;
                    if let Some(v) = g.objectness.get(idx) {
                        d_o[k * hw + cell] = *v;
                    }
                    if let Some(v) = g.rpn_deltas.get(idx) {
                        for j in 0..4 {
                            d_d[(4 * k + j) * hw + cell] = v[j];
                        }
                    }
                }
            }
            let mut d_hidden = vec![0.0; self.config.rpn_channels * hw];
            let (w, b) = split2(gt, s.rpn_obj());
            nn::conv2d_backward(&obj, &rpn.hidden, fh, fw, self.p(s.rpn_obj()), &d_o, w, b, Some(&mut d_hidden));
            let (w, b) = split2(gt, s.rpn_deltas());
            nn::conv2d_backward(&del, &rpn.hidden, fh, fw, self.p(s.rpn_deltas()), &d_d, w, b, Some(&mut d_hidden));
            nn::relu_backward_inplace(&rpn.hidden, &mut d_hidden);
            let (w, b) = split2(gt, s.rpn_conv());
            nn::conv2d_backward(&conv, bb.features(), fh, fw, self.p(s.rpn_conv()), &d_hidden, w, b, Some(&mut d_feat));
        }

        // Backbone
        let mut d_out = d_feat;
        for i in (0..bb.acts.len()).rev() {
            nn::relu_backward_inplace(&bb.acts[i].0, &mut d_out);
            let (inp, ih, iw) = if i == 0 {
                (&bb.input, bb.in_h, bb.in_w)
            } else {
                let p = &bb.acts[i - 1];
                (&p.0, p.1, p.2)
            };
            let (wi, bi) = s.conv(i);
            debug_assert_eq!(bi, wi + 1);
            let mut d_in = if i > 0 { vec![0.0; inp.len()] } else { Vec::new() };
            let (w, b) = split2(gt, wi);
            nn::conv2d_backward(
                &self.conv_shape(i),
                inp,
                ih,
                iw,
                self.p(wi),
                &d_out,
                w,
                b,
                if i > 0 { Some(&mut d_in) } else { None },
            );
            d_out = d_in;
        }
    }
}

/// Mutable weight and bias gradient buffers at `i` and `i + 1`.
fn split2(ts: &mut [Tensor], i: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = ts[i..].split_at_mut(1);
    (&mut a[0].data, &mut b[0].data)
}
