//! Feature alignment: domain-adversarial heads behind gradient reversal, and
//! substitution of image-to-image translated inputs.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::png::{read_png, write_png};
use crate::datamodel::synthetic::{apply_shift, undo_contrast};
use crate::datamodel::{DetectionDataset, ImageRecord, ShiftParams};
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, ConvShape};
use crate::params::{ParamSet, Tensor};
use crate::rng::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub image_level: bool,
    pub instance_level: bool,
    pub img2img: bool,
    pub adv_weight: f64,
    /// Ramp the reversal weight linearly over the first 20% of iterations.
    pub warmup: bool,
    pub image_disc_channels: usize,
    pub instance_disc_hidden: usize,
    /// Discriminator learning rate relative to the detector's.
    pub disc_lr_scale: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            image_level: false,
            instance_level: false,
            img2img: false,
            adv_weight: 0.1,
            warmup: false,
            image_disc_channels: 16,
            instance_disc_hidden: 16,
            disc_lr_scale: 1.0,
        }
    }
}

impl AlignConfig {
    pub fn adversarial(&self) -> bool {
        self.image_level || self.instance_level
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return Err(Error::Config("align.adv_weight must be non-negative".into()));
        }
        if self.adversarial() && self.img2img {
            return Err(Error::Config(
                "adversarial alignment and image-to-image translation cannot be combined".into(),
            ));
        }
        if self.image_disc_channels == 0 || self.instance_disc_hidden == 0 || !(self.disc_lr_scale > 0.0) {
            return Err(Error::Config("discriminator sizes and learning rate scale must be positive".into()));
        }
        Ok(())
    }

    /// Reversal weight at `iteration` out of `total`.
    pub fn adv_weight_at(&self, iteration: usize, total: usize) -> f64 {
        if !self.warmup {
            return self.adv_weight;
        }
        let ramp = (0.2 * total as f64).max(1.0);
        self.adv_weight * (iteration as f64 / ramp).min(1.0)
    }
}

/// Identity on the forward pass, `-lambda` times the gradient on the way back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReverse {
    pub lambda: f64,
}

impl GradReverse {
    pub fn forward<'x>(&self, x: &'x [f64]) -> &'x [f64] {
        x
    }

    pub fn backward(&self, grad: &[f64]) -> Vec<f64> {
        grad.iter().map(|g| -self.lambda * g).collect()
    }
}

/// Mean binary cross-entropy of sigmoid logits against domain labels
/// (source 0, target 1), with its gradient per logit.
pub fn dann_loss(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} domain logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let loss = logits.iter().zip(labels).map(|(&z, &y)| nn::softplus(z) - y * z).sum::<f64>() / n;
    let grad = logits.iter().zip(labels).map(|(&z, &y)| (sigmoid(z) - y) / n).collect();
    Ok((loss, grad))
}

fn uniform_tensor(shape: &[usize], fan_in: usize, seed: u64, slot: u64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = rng_for(seed, &[0xD15C, slot]);
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
    t
}

/// 3x3 conv, ReLU, global average pool, linear to one logit.
#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    pub channels: usize,
    pub hidden: usize,
}

/// Activations of one image through the image discriminator.
#[derive(Clone, Debug)]
pub struct ImageDiscPass {
    hidden: Vec<f64>,
    pooled: Vec<f64>,
    h: usize,
    w: usize,
    pub logit: f64,
}

impl ImageDiscriminator {
    fn conv(&self) -> ConvShape {
        ConvShape {
            c_in: self.channels,
            c_out: self.hidden,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("disc_img.conv.weight", uniform_tensor(&[self.hidden, self.channels, 3, 3], 9 * self.channels, seed, 0));
        p.push("disc_img.conv.bias", Tensor::zeros(&[self.hidden]));
        p.push("disc_img.fc.weight", uniform_tensor(&[1, self.hidden], self.hidden, seed, 1));
        p.push("disc_img.fc.bias", Tensor::zeros(&[1]));
        p
    }

    fn check(&self, params: &ParamSet, len: usize, h: usize, w: usize) -> Result<()> {
        let expect = [self.hidden, self.channels, 3, 3];
        let found = &params.tensors()[0].shape;
        if found[..] != expect[..] {
            return Err(Error::ShapeMismatch {
                name: "disc_img.conv.weight".into(),
                expected: expect.to_vec(),
                found: found.clone(),
            });
        }
        if len != self.channels * h * w {
            return Err(Error::DimensionMismatch(format!(
                "feature map of {len} values is not {} channels of {h}x{w}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, features: &[f64], h: usize, w: usize) -> Result<ImageDiscPass> {
        self.check(params, features.len(), h, w)?;
        let t = params.tensors();
        let (mut hidden, _, _) = nn::conv2d_forward(&self.conv(), features, h, w, &t[0].data, &t[1].data);
        nn::relu_inplace(&mut hidden);
        let pooled: Vec<f64> = hidden.chunks(h * w).map(|c| c.iter().sum::<f64>() / (h * w) as f64).collect();
        let logit = nn::linear_forward(&pooled, &t[2].data, &t[3].data)[0];
        Ok(ImageDiscPass {
            hidden,
            pooled,
            h,
            w,
            logit,
        })
    }

    /// Adds parameter gradients to `grads` and returns the gradient with
    /// respect to the input feature map.
    pub fn backward(
        &self,
        params: &ParamSet,
        features: &[f64],
        pass: &ImageDiscPass,
        d_logit: f64,
        grads: &mut ParamSet,
    ) -> Vec<f64> {
        let t = params.tensors();
        let g = grads.tensors_mut();
        let (gw, rest) = g.split_at_mut(1);
        let (gb, rest) = rest.split_at_mut(1);
        let (fw, fb) = rest.split_at_mut(1);
        let mut d_pooled = vec![0.0; self.hidden];
        nn::linear_backward(&pass.pooled, &t[2].data, &[d_logit], &mut fw[0].data, &mut fb[0].data, Some(&mut d_pooled));
        let hw = pass.h * pass.w;
        let mut d_hidden: Vec<f64> = d_pooled.iter().flat_map(|&d| std::iter::repeat(d / hw as f64).take(hw)).collect();
        nn::relu_backward_inplace(&pass.hidden, &mut d_hidden);
        let mut d_feat = vec![0.0; features.len()];
        nn::conv2d_backward(
            &self.conv(),
            features,
            pass.h,
            pass.w,
            &t[0].data,
            &d_hidden,
            &mut gw[0].data,
            &mut gb[0].data,
            Some(&mut d_feat),
        );
        d_feat
    }
}

/// Hidden fully-connected layer with ReLU, then linear to one logit.
#[derive(Clone, Debug)]
pub struct InstanceDiscriminator {
    pub width: usize,
    pub hidden: usize,
}

impl InstanceDiscriminator {
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("disc_ins.fc1.weight", uniform_tensor(&[self.hidden, self.width], self.width, seed, 2));
        p.push("disc_ins.fc1.bias", Tensor::zeros(&[self.hidden]));
        p.push("disc_ins.fc2.weight", uniform_tensor(&[1, self.hidden], self.hidden, seed, 3));
        p.push("disc_ins.fc2.bias", Tensor::zeros(&[1]));
        p
    }

    /// One logit per input row, with each row's hidden activations.
    pub fn forward(&self, params: &ParamSet, rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let t = params.tensors();
        if t[0].shape != [self.hidden, self.width] {
            return Err(Error::ShapeMismatch {
                name: "disc_ins.fc1.weight".into(),
                expected: vec![self.hidden, self.width],
                found: t[0].shape.clone(),
            });
        }
        let mut logits = Vec::with_capacity(rows.len());
        let mut hiddens = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() != self.width {
                return Err(Error::DimensionMismatch(format!(
                    "instance feature of width {} for a discriminator of width {}",
                    r.len(),
                    self.width
                )));
            }
            let mut h = nn::linear_forward(r, &t[0].data, &t[1].data);
            nn::relu_inplace(&mut h);
            logits.push(nn::linear_forward(&h, &t[2].data, &t[3].data)[0]);
            hiddens.push(h);
        }
        Ok((logits, hiddens))
    }

    /// Adds parameter gradients and returns the gradient for each input row.
    pub fn backward(
        &self,
        params: &ParamSet,
        rows: &[Vec<f64>],
        hiddens: &[Vec<f64>],
        d_logits: &[f64],
        grads: &mut ParamSet,
    ) -> Vec<Vec<f64>> {
        let t = params.tensors();
        let g = grads.tensors_mut();
        let (w1, rest) = g.split_at_mut(1);
        let (b1, rest) = rest.split_at_mut(1);
        let (w2, b2) = rest.split_at_mut(1);
        rows.iter()
            .zip(hiddens)
            .zip(d_logits)
            .map(|((x, h), &dz)| {
                let mut dh = vec![0.0; self.hidden];
                nn::linear_backward(h, &t[2].data, &[dz], &mut w2[0].data, &mut b2[0].data, Some(&mut dh));
                nn::relu_backward_inplace(h, &mut dh);
                let mut dx = vec![0.0; self.width];
                nn::linear_backward(x, &t[0].data, &dh, &mut w1[0].data, &mut b1[0].data, Some(&mut dx));
                dx
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationDirection {
    SrcToTgtlike,
    TgtToSrclike,
}

impl TranslationDirection {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::SrcToTgtlike => "src_to_tgtlike",
            Self::TgtToSrclike => "tgt_to_srclike",
        }
    }
}

/// Pre-translated images stored as `<root>/<direction>/<image_id>.png`.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslatedPair {
    pub root: PathBuf,
}

impl TranslatedPair {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, direction: TranslationDirection, id: &str) -> PathBuf {
        self.root.join(direction.dir_name()).join(format!("{id}.png"))
    }
}

/// Replaces pixels with their translated counterparts; ids and labels are kept.
pub fn substitute_translated(
    batch: &[ImageRecord],
    pair: &TranslatedPair,
    direction: TranslationDirection,
) -> Result<Vec<ImageRecord>> {
    batch
        .iter()
        .map(|r| {
            let path = pair.path_for(direction, &r.id);
            if !path.is_file() {
                return Err(Error::MissingImage { id: r.id.clone(), path });
            }
            let pixels = read_png(&path)?;
            if (pixels.height, pixels.width, pixels.channels) != (r.pixels.height, r.pixels.width, r.pixels.channels) {
                return Err(Error::DimensionMismatch(format!(
                    "translated image for `{}` is {}x{}x{}, original is {}x{}x{}",
                    r.id,
                    pixels.height,
                    pixels.width,
                    pixels.channels,
                    r.pixels.height,
                    r.pixels.width,
                    r.pixels.channels
                )));
            }
            Ok(ImageRecord {
                pixels,
                ..r.clone()
            })
        })
        .collect()
}

/// Emulates translation models with the known photometric shift: source
/// images get the shift applied, target images get its contrast undone.
pub fn write_stylized_pair(
    root: &Path,
    source: &DetectionDataset,
    target: &DetectionDataset,
    shift: &ShiftParams,
    seed: u64,
) -> Result<TranslatedPair> {
    let pair = TranslatedPair::new(root);
    for dir in [TranslationDirection::SrcToTgtlike, TranslationDirection::TgtToSrclike] {
        let d = root.join(dir.dir_name());
        std::fs::create_dir_all(&d).map_err(crate::error::io_err(&d))?;
    }
    for (i, r) in source.records.iter().enumerate() {
        let mut img = r.pixels.clone();
        apply_shift(&mut img, shift, &mut rng_for(derive_seed(seed, &[0x5717]), &[i as u64]));
        write_png(&pair.path_for(TranslationDirection::SrcToTgtlike, &r.id), &img)?;
    }
    for r in &target.records {
        let mut img = r.pixels.clone();
        undo_contrast(&mut img, shift);
        write_png(&pair.path_for(TranslationDirection::TgtToSrclike, &r.id), &img)?;
    }
    Ok(pair)
}
