use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::augment::{Designation, TransformKind, TransformPipeline};
use crate::detector::DetectorConfig;
use crate::distill::{DistillConfig, EmaConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherUpdate {
    None,
    StudentIsTeacher,
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BurnIn {
    None,
    Fixed {
        iterations: usize,
    },
    /// Strong source augmentations, an EMA copy, and early stopping on a
    /// held-out tail of the source split.
    Robust {
        max_iterations: usize,
        #[serde(default = "default_patience")]
        patience: usize,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_patience() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipelines {
    pub source: TransformPipeline,
    /// Used on the second half of the source sub-batch when present.
    #[serde(default)]
    pub source_alt: Option<TransformPipeline>,
    pub target: TransformPipeline,
    /// Teacher view; must be a prefix of `target`.
    pub weak: TransformPipeline,
    /// Source pipeline during robust burn-in.
    pub burn_in_strong: TransformPipeline,
}

pub(crate) const DESK_SCALE: (f64, f64) = (0.75, 1.25);

pub(crate) fn flip_scale() -> Vec<TransformKind> {
    vec![
        TransformKind::MultiScale {
            scale_min: DESK_SCALE.0,
            scale_max: DESK_SCALE.1,
        },
        TransformKind::HFlip,
    ]
}

pub(crate) fn jitter() -> TransformKind {
    TransformKind::ColorJitter {
        brightness: 0.4,
        contrast: 0.4,
        saturation: 0.4,
    }
}

pub(crate) fn cutout() -> TransformKind {
    TransformKind::Cutout {
        max_fraction: 0.25,
        count: 2,
    }
}

pub(crate) fn pipeline(kinds: Vec<TransformKind>) -> TransformPipeline {
    let designation = if kinds.iter().all(|k| matches!(k, TransformKind::HFlip | TransformKind::MultiScale { .. })) {
        Designation::Weak
    } else {
        Designation::Strong
    };
    TransformPipeline {
        kinds,
        designation,
        cutout_fill: 0.5,
    }
}

impl Default for Pipelines {
    fn default() -> Self {
        let strong = pipeline([flip_scale(), vec![jitter(), cutout()]].concat());
        Self {
            source: pipeline(flip_scale()),
            source_alt: None,
            target: strong.clone(),
            weak: pipeline(flip_scale()),
            burn_in_strong: strong,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    pub total_batch: usize,
    pub target_fraction: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient norm limit; zero disables clipping.
    pub grad_clip: f64,
    pub iterations: usize,
    pub ema: EmaConfig,
    /// Absent means no distillation.
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    pub align: AlignConfig,
    pub pipelines: Pipelines,
    pub teacher_update: TeacherUpdate,
    pub burn_in: BurnIn,
    /// Target records come from the labeled target split and receive the
    /// supervised loss.
    pub target_supervised: bool,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            total_batch: 16,
            target_fraction: 0.5,
            learning_rate: 0.01,
            momentum: 0.9,
            grad_clip: 10.0,
            iterations: 1000,
            ema: EmaConfig::default(),
            distill: Some(DistillConfig::default()),
            align: AlignConfig::default(),
            pipelines: Pipelines::default(),
            teacher_update: TeacherUpdate::Ema,
            burn_in: BurnIn::None,
            target_supervised: false,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.detector.validate()?;
        self.ema.validate()?;
        self.align.validate()?;
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        if self.total_batch < 2 {
            return err(format!("train.total_batch must be at least 2, got {}", self.total_batch));
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return err(format!("train.target_fraction must be in [0, 1], got {}", self.target_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("train.momentum must be in [0, 1)".into());
        }
        if !(self.grad_clip >= 0.0) {
            return err("train.grad_clip must be non-negative".into());
        }
        if self.eval_every == 0 {
            return err("train.eval_every must be positive".into());
        }
        if self.target_supervised && self.distill.is_some() {
            return err("train.target_supervised cannot be combined with distillation".into());
        }
        let p = &self.pipelines;
        for pl in [&p.source, &p.target, &p.weak, &p.burn_in_strong].into_iter().chain(p.source_alt.as_ref()) {
            pl.validate()?;
        }
        if p.weak.kinds.len() > p.target.kinds.len() || p.weak.kinds[..] != p.target.kinds[..p.weak.kinds.len()] {
            return err("pipelines.weak must be a prefix of pipelines.target".into());
        }
        match self.burn_in {
            BurnIn::Robust {
                max_iterations,
                patience,
                val_fraction,
            } => {
                if max_iterations == 0 || patience == 0 {
                    return err("burn_in.max_iterations and burn_in.patience must be positive".into());
                }
                if !(val_fraction > 0.0 && val_fraction < 1.0) {
                    return err(format!("burn_in.val_fraction must be in (0, 1), got {val_fraction}"));
                }
            }
            BurnIn::Fixed { .. } | BurnIn::None => {}
        }
        Ok(())
    }

    /// Round-half-up target count and the remaining source count.
    pub fn batch_split(&self) -> (usize, usize) {
        batch_split(self.total_batch, self.target_fraction)
    }

    /// Whether a teacher (or EMA copy) is maintained.
    pub fn has_teacher(&self) -> bool {
        self.distill.is_some() || self.ema.enabled
    }

    /// Whether the maintained teacher tracks the student over time.
    pub fn teacher_evolves(&self) -> bool {
        self.has_teacher() && !(self.distill.is_some() && self.teacher_update == TeacherUpdate::None)
    }
}

/// `(source, target)` image counts for a batch of `total`.
pub fn batch_split(total: usize, target_fraction: f64) -> (usize, usize) {
    let tgt = ((target_fraction * total as f64) + 0.5).floor() as usize;
    let tgt = tgt.min(total);
    (total - tgt, tgt)
}
