use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{cutout, flip_scale, jitter, pipeline, BurnIn, TeacherUpdate, TrainConfig};
use crate::augment::{mic_default_patch, TransformKind, TransformPipeline};
use crate::distill::{DistillConfig, DistillMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodPreset {
    SourceOnly,
    Oracle,
    MeanTeacherBase,
    SadaStyle,
    UmtStyle,
    MicStyle,
    AtStyle,
    AldiPp,
}

/// Burn-in budget used when a preset asks for a fixed or robust burn-in,
/// as a multiple of the self-training iteration count. Reference presets
/// train for the burn-in budget plus the self-training iterations.
pub const BURN_IN_FRACTION: f64 = 0.5;

impl MethodPreset {
    pub const ALL: [MethodPreset; 8] = [
        MethodPreset::SourceOnly,
        MethodPreset::Oracle,
        MethodPreset::MeanTeacherBase,
        MethodPreset::SadaStyle,
        MethodPreset::UmtStyle,
        MethodPreset::MicStyle,
        MethodPreset::AtStyle,
        MethodPreset::AldiPp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodPreset::SourceOnly => "source_only",
            MethodPreset::Oracle => "oracle",
            MethodPreset::MeanTeacherBase => "mean_teacher_base",
            MethodPreset::SadaStyle => "sada_style",
            MethodPreset::UmtStyle => "umt_style",
            MethodPreset::MicStyle => "mic_style",
            MethodPreset::AtStyle => "at_style",
            MethodPreset::AldiPp => "aldi_pp",
        }
    }

    /// Reference rows reported alongside adaptation methods.
    pub fn is_reference(self) -> bool {
        matches!(self, MethodPreset::SourceOnly | MethodPreset::Oracle)
    }

    /// Applies this method's settings on top of `base`. Shared settings
    /// (detector, optimizer, batch size, iterations, seed) come from `base`.
    pub fn apply(self, base: &TrainConfig, image_size: usize) -> Result<TrainConfig> {
        let mut c = base.clone();
        let fs = flip_scale;
        let mic = TransformKind::MicMask {
            patch_size: mic_default_patch(image_size),
            mask_ratio: 0.5,
        };
        let hard = Some(DistillConfig {
            mode: DistillMode::Hard,
            ..base.distill.clone().unwrap_or_default()
        });
        let soft = Some(DistillConfig {
            mode: DistillMode::Soft,
            ..base.distill.clone().unwrap_or_default()
        });
        let burn = ((base.iterations as f64 * BURN_IN_FRACTION).round() as usize).max(1);
        c.pipelines.weak = pipeline(fs());
        c.pipelines.source_alt = None;
        c.align.image_level = false;
        c.align.instance_level = false;
        c.align.img2img = false;
        c.target_supervised = false;
        c.teacher_update = TeacherUpdate::Ema;
        c.ema.enabled = true;
        c.burn_in = BurnIn::None;
        match self {
            MethodPreset::SourceOnly => {
                c.iterations = base.iterations + burn;
                c.pipelines.source = pipeline([fs(), vec![cutout()]].concat());
                c.target_fraction = 0.0;
                c.distill = None;
            }
            MethodPreset::Oracle => {
                c.iterations = base.iterations + burn;
                c.pipelines.target = pipeline([fs(), vec![jitter(), cutout()]].concat());
                c.target_fraction = 1.0;
                c.target_supervised = true;
                c.distill = None;
            }
            MethodPreset::MeanTeacherBase => {
                c.burn_in = BurnIn::Fixed { iterations: burn };
                c.pipelines.source = pipeline(fs());
                c.pipelines.target = pipeline([fs(), vec![jitter(), cutout()]].concat());
                c.target_fraction = 0.5;
                c.distill = hard;
            }
            MethodPreset::SadaStyle => {
                c.pipelines.source = pipeline(fs());
                c.pipelines.target = pipeline(fs());
                c.target_fraction = 0.5;
                c.distill = None;
                c.align.image_level = true;
                c.align.instance_level = true;
            }
            MethodPreset::UmtStyle => {
                c.pipelines.source = pipeline(fs());
                c.pipelines.target = pipeline([fs(), vec![TransformKind::CropPad { fraction: 0.1 }, jitter()]].concat());
                c.target_fraction = 0.5;
                c.distill = hard;
                c.align.img2img = true;
            }
            MethodPreset::MicStyle => {
                c.pipelines.source = pipeline(fs());
                c.pipelines.target = pipeline([fs(), vec![jitter(), mic]].concat());
                c.target_fraction = 0.5;
                c.distill = hard;
                c.align.image_level = true;
                c.align.instance_level = true;
            }
            MethodPreset::AtStyle => {
                c.burn_in = BurnIn::Fixed { iterations: burn };
                c.pipelines.source = pipeline(fs());
                c.pipelines.source_alt = Some(pipeline([fs(), vec![jitter(), cutout()]].concat()));
                c.pipelines.target = pipeline([fs(), vec![jitter(), cutout()]].concat());
                c.target_fraction = 0.3;
                c.distill = hard;
                c.align.image_level = true;
            }
            MethodPreset::AldiPp => {
                c.burn_in = BurnIn::Robust {
                    max_iterations: burn,
                    patience: 5,
                    val_fraction: 0.1,
                };
                c.pipelines.source = pipeline([fs(), vec![jitter(), cutout()]].concat());
                c.pipelines.target = pipeline([fs(), vec![jitter(), mic]].concat());
                c.target_fraction = 0.5;
                c.distill = soft;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Named target augmentation sets: `weak` (flip and resize), `strong`
/// (plus color jitter and cutout) and `mic` (plus color jitter and masked
/// patches).
pub fn target_augmentations(name: &str, image_size: usize) -> Result<TransformPipeline> {
    let extra = match name {
        "weak" => vec![],
        "strong" => vec![jitter(), cutout()],
        "mic" => vec![
            jitter(),
            TransformKind::MicMask {
                patch_size: mic_default_patch(image_size),
                mask_ratio: 0.5,
            },
        ],
        other => return Err(Error::Config(format!("unknown augmentation set `{other}`"))),
    };
    Ok(pipeline([flip_scale(), extra].concat()))
}

impl fmt::Display for MethodPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}
