//! Seeded augmentation pipelines with exact replay.
//!
//! Every sampled draw is recorded as an [`AppliedTransform`]; replaying the
//! list on the same input reproduces the output bit for bit. The draw for
//! step `i` of a pipeline depends only on `(rng_seed, i)`, which is what lets
//! [`paired_views`] share geometric draws between a weak and a strong view.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, BoundingBox, Image, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Boxes narrower or shorter than this after remapping are dropped.
const MIN_BOX_SIDE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformKind {
    #[serde(rename = "hflip")]
    HFlip,
    MultiScale { scale_min: f64, scale_max: f64 },
    CropPad { fraction: f64 },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64 },
    Cutout { max_fraction: f64, count: usize },
    MicMask { patch_size: usize, mask_ratio: f64 },
}

impl TransformKind {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            TransformKind::HFlip | TransformKind::MultiScale { .. } | TransformKind::CropPad { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        let ok = match *self {
            TransformKind::HFlip => true,
            TransformKind::MultiScale {
                scale_min,
                scale_max,
            } => scale_min > 0.0 && scale_min <= scale_max && scale_max.is_finite(),
            TransformKind::CropPad { fraction } => unit(fraction),
            TransformKind::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => unit(brightness) && unit(contrast) && unit(saturation),
            TransformKind::Cutout {
                max_fraction,
                count,
            } => unit(max_fraction) && count >= 1,
            TransformKind::MicMask {
                patch_size,
                mask_ratio,
            } => patch_size >= 1 && unit(mask_ratio),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid transform parameters: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Designation {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPipeline {
    pub kinds: Vec<TransformKind>,
    pub designation: Designation,
    /// Fill value for cutout rectangles (the dataset mean pixel).
    #[serde(default = "default_fill")]
    pub cutout_fill: f64,
}

fn default_fill() -> f64 {
    0.5
}

impl TransformPipeline {
    pub fn new(kinds: Vec<TransformKind>, designation: Designation) -> Result<Self> {
        let p = Self {
            kinds,
            designation,
            cutout_fill: default_fill(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            kinds: Vec::new(),
            designation: Designation::Weak,
            cutout_fill: default_fill(),
        }
    }

    /// Random flip and resizing.
    pub fn weak_default() -> Self {
        Self {
            kinds: vec![
                TransformKind::MultiScale {
                    scale_min: 0.5,
                    scale_max: 1.5,
                },
                TransformKind::HFlip,
            ],
            designation: Designation::Weak,
            cutout_fill: default_fill(),
        }
    }

    /// Resizing, flip, color jitter and cutout.
    pub fn strong_default() -> Self {
        let mut kinds = Self::weak_default().kinds;
        kinds.push(TransformKind::ColorJitter {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        });
        kinds.push(TransformKind::Cutout {
            max_fraction: 0.25,
            count: 3,
        });
        Self {
            kinds,
            designation: Designation::Strong,
            cutout_fill: default_fill(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in &self.kinds {
            k.validate()?;
            if self.designation == Designation::Weak
                && !matches!(k, TransformKind::HFlip | TransformKind::MultiScale { .. })
            {
                return Err(Error::Config(format!(
                    "weak pipelines may only contain flips and rescaling, found {k:?}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.cutout_fill) {
            return Err(Error::Config("cutout_fill must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_fill(mut self, fill: f64) -> Self {
        self.cutout_fill = fill;
        self
    }
}

/// Default MIC patch size for a given image side.
pub fn mic_default_patch(image_size: usize) -> usize {
    ((image_size as f64 / 12.0).round() as usize).max(1)
}

/// Concrete draw for one transform step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SampledParams {
    Flip { flip: bool },
    Resize { height: usize, width: usize },
    Shift { dx: i64, dy: i64 },
    Jitter { brightness: f64, contrast: f64, saturation: f64 },
    Erase { rects: Vec<[usize; 4]>, fill: f64 },
    Mask { patch_size: usize, patches: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedTransform {
    pub kind: TransformKind,
    pub params: SampledParams,
}

impl AppliedTransform {
    pub fn is_geometric(&self) -> bool {
        self.kind.is_geometric()
    }
}

fn sample_step(
    kind: &TransformKind,
    img: &Image,
    fill: f64,
    rng_seed: u64,
    step: usize,
) -> Result<SampledParams> {
    let mut rng = rng_for(rng_seed, &[0xA11C, step as u64]);
    let (h, w) = (img.height, img.width);
    Ok(match *kind {
        TransformKind::HFlip => SampledParams::Flip {
            flip: rng.gen_bool(0.5),
        },
        TransformKind::MultiScale {
            scale_min,
            scale_max,
        } => {
            let f = if scale_min == scale_max {
                scale_min
            } else {
                rng.gen_range(scale_min..=scale_max)
            };
            let side = |v: usize| ((v as f64 * f).round() as usize).max(crate::datamodel::dataset::MIN_IMAGE_SIDE);
            SampledParams::Resize {
                height: side(h),
                width: side(w),
            }
        }
        TransformKind::CropPad { fraction } => {
            let mx = (fraction * w as f64).floor() as i64;
            let my = (fraction * h as f64).floor() as i64;
            SampledParams::Shift {
                dx: rng.gen_range(-mx..=mx),
                dy: rng.gen_range(-my..=my),
            }
        }
        TransformKind::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => SampledParams::Jitter {
            brightness: rng.gen_range(1.0 - brightness..=1.0 + brightness),
            contrast: rng.gen_range(1.0 - contrast..=1.0 + contrast),
            saturation: rng.gen_range(1.0 - saturation..=1.0 + saturation),
        },
        TransformKind::Cutout {
            max_fraction,
            count,
        } => {
            let n = rng.gen_range(1..=count);
            let total = (h * w) as f64;
            let rects = (0..n)
                .map(|_| {
                    let area = rng.gen_range(0.0..=max_fraction) * total;
                    let aspect: f64 = rng.gen_range(0.5..=2.0);
                    let rh = ((area * aspect).sqrt().floor() as usize).clamp(1, h);
                    let rw = ((area / rh as f64).floor() as usize).clamp(1, w);
                    // Re-shrink if clamping pushed the area over the cap.
                    let rw = if (rh * rw) as f64 > max_fraction * total {
                        ((max_fraction * total / rh as f64).floor() as usize).max(1)
                    } else {
                        rw
                    };
                    let y0 = rng.gen_range(0..=h - rh);
                    let x0 = rng.gen_range(0..=w - rw);
                    [y0, x0, rh, rw]
                })
                .collect();
            SampledParams::Erase { rects, fill }
        }
        TransformKind::MicMask {
            patch_size,
            mask_ratio,
        } => {
            if h < patch_size || w < patch_size {
                return Err(Error::InvalidData(format!(
                    "image {h}x{w} smaller than mask patch {patch_size}"
                )));
            }
            let n = h.div_ceil(patch_size) * w.div_ceil(patch_size);
            let k = (mask_ratio * n as f64).round() as usize;
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let mut patches = all[..k].to_vec();
            patches.sort_unstable();
            SampledParams::Mask {
                patch_size,
                patches,
            }
        }
    })
}

/// Applies one recorded step to pixels and annotations.
fn apply_step(img: &Image, anns: Option<&[Annotation]>, params: &SampledParams) -> (Image, Option<Vec<Annotation>>) {
    match params {
        SampledParams::Flip { flip } => {
            if !flip {
                return (img.clone(), anns.map(<[_]>::to_vec));
            }
            let mut out = img.clone();
            let (w, c) = (img.width, img.channels);
            for y in 0..img.height {
                for x in 0..w {
                    for ch in 0..c {
                        out.data[(y * w + x) * c + ch] = img.data[(y * w + (w - 1 - x)) * c + ch];
                    }
                }
            }
            let wf = w as f64;
            let anns = anns.map(|a| {
                a.iter()
                    .map(|a| Annotation {
                        bbox: BoundingBox::new_unchecked(wf - a.bbox.x2, a.bbox.y1, wf - a.bbox.x1, a.bbox.y2),
                        class_id: a.class_id,
                    })
                    .collect()
            });
            (out, anns)
        }
        SampledParams::Resize { height, width } => {
            let out = resize_bilinear(img, *height, *width);
            let sx = *width as f64 / img.width as f64;
            let sy = *height as f64 / img.height as f64;
            let anns = anns.map(|a| {
                a.iter()
                    .map(|a| Annotation {
                        bbox: BoundingBox::new_unchecked(a.bbox.x1 * sx, a.bbox.y1 * sy, a.bbox.x2 * sx, a.bbox.y2 * sy),
                        class_id: a.class_id,
                    })
                    .collect()
            });
            (out, anns)
        }
        SampledParams::Shift { dx, dy } => {
            let (h, w, c) = (img.height, img.width, img.channels);
            let mut out = Image::filled(h, w, c, 0.0);
            for y in 0..h {
                let sy = y as i64 - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let sx = x as i64 - dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    for ch in 0..c {
                        out.data[(y * w + x) * c + ch] = img.data[(sy as usize * w + sx as usize) * c + ch];
                    }
                }
            }
            let (fx, fy) = (*dx as f64, *dy as f64);
            let anns = anns.map(|a| {
                a.iter()
                    .filter_map(|a| {
                        let b = BoundingBox::new_unchecked(a.bbox.x1 + fx, a.bbox.y1 + fy, a.bbox.x2 + fx, a.bbox.y2 + fy)
                            .clip(w as f64, h as f64);
                        (b.width() >= MIN_BOX_SIDE && b.height() >= MIN_BOX_SIDE).then_some(Annotation {
                            bbox: b,
                            class_id: a.class_id,
                        })
                    })
                    .collect()
            });
            (out, anns)
        }
        SampledParams::Jitter {
            brightness,
            contrast,
            saturation,
        } => {
            let mut out = img.clone();
            for v in &mut out.data {
                *v = (*v * brightness).clamp(0.0, 1.0);
            }
            let mean = out.mean();
            for v in &mut out.data {
                *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
            }
            if out.channels == 3 {
                for px in out.data.chunks_exact_mut(3) {
                    let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                    for v in px {
                        *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
                    }
                }
            }
            (out, anns.map(<[_]>::to_vec))
        }
        SampledParams::Erase { rects, fill } => {
            let mut out = img.clone();
            for &[y0, x0, rh, rw] in rects {
                for y in y0..(y0 + rh).min(img.height) {
                    for x in x0..(x0 + rw).min(img.width) {
                        for ch in 0..img.channels {
                            let i = out.index(y, x, ch);
                            out.data[i] = *fill;
                        }
                    }
                }
            }
            (out, anns.map(<[_]>::to_vec))
        }
        SampledParams::Mask {
            patch_size,
            patches,
        } => {
            let mut out = img.clone();
            let p = *patch_size;
            let nw = img.width.div_ceil(p);
            for &idx in patches {
                let (py, px) = (idx / nw, idx % nw);
                for y in py * p..((py + 1) * p).min(img.height) {
                    for x in px * p..((px + 1) * p).min(img.width) {
                        for ch in 0..img.channels {
                            let i = out.index(y, x, ch);
                            out.data[i] = 0.0;
                        }
                    }
                }
            }
            (out, anns.map(<[_]>::to_vec))
        }
    }
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if height == img.height && width == img.width {
        return img.clone();
    }
    let c = img.channels;
    let mut out = Image::filled(height, width, c, 0.0);
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let v = (1.0 - ty) * ((1.0 - tx) * img.get(y0, x0, ch) + tx * img.get(y0, x1, ch))
                    + ty * ((1.0 - tx) * img.get(y1, x0, ch) + tx * img.get(y1, x1, ch));
                out.data[(y * width + x) * c + ch] = v;
            }
        }
    }
    out
}

/// Replays recorded transforms on a record.
pub fn replay(record: &ImageRecord, applied: &[AppliedTransform]) -> ImageRecord {
    let mut img = record.pixels.clone();
    let mut anns = record.annotations.clone();
    for step in applied {
        let (i, a) = apply_step(&img, anns.as_deref(), &step.params);
        img = i;
        anns = a;
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    ImageRecord {
        id: record.id.clone(),
        pixels: img,
        domain: record.domain,
        annotations: anns,
    }
}

/// Samples and applies a pipeline. Returns the augmented record and the draws.
pub fn apply_pipeline(
    record: &ImageRecord,
    pipeline: &TransformPipeline,
    rng_seed: u64,
) -> Result<(ImageRecord, Vec<AppliedTransform>)> {
    pipeline.validate()?;
    let mut current = record.clone();
    let mut applied = Vec::with_capacity(pipeline.kinds.len());
    for (step, kind) in pipeline.kinds.iter().enumerate() {
        let params = sample_step(kind, &current.pixels, pipeline.cutout_fill, rng_seed, step)?;
        let t = AppliedTransform {
            kind: kind.clone(),
            params,
        };
        current = replay(&current, std::slice::from_ref(&t));
        applied.push(t);
    }
    Ok((current, applied))
}

/// Weak (teacher) and strong (student) views of one image with shared
/// geometric draws, so boxes correspond one to one between the views.
///
/// `weak.kinds` must be a prefix of `strong.kinds`. Geometric kinds in the
/// strong suffix are replayed on the weak view as well.
pub fn paired_views(
    record: &ImageRecord,
    weak: &TransformPipeline,
    strong: &TransformPipeline,
    rng_seed: u64,
) -> Result<(ImageRecord, ImageRecord)> {
    weak.validate()?;
    strong.validate()?;
    if weak.kinds.len() > strong.kinds.len() || weak.kinds[..] != strong.kinds[..weak.kinds.len()] {
        return Err(Error::Config(
            "weak pipeline must be a prefix of the strong pipeline".into(),
        ));
    }
    let (strong_view, strong_applied) = apply_pipeline(record, strong, rng_seed)?;
    let weak_applied: Vec<AppliedTransform> = strong_applied
        .iter()
        .enumerate()
        .filter(|(i, t)| *i < weak.kinds.len() || t.is_geometric())
        .map(|(_, t)| t.clone())
        .collect();
    Ok((replay(record, &weak_applied), strong_view))
}
