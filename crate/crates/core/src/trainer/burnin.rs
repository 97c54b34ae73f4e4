use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BurnIn, TrainConfig};
use super::step::Trainer;
use crate::align::AlignConfig;
use crate::datamodel::DetectionDataset;
use crate::detector::{infer, DetectorConfig};
use crate::error::Result;
use crate::evalmetrics::{ap50, EvalResult};
use crate::params::ParamSet;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct BurninResult {
    pub params: ParamSet,
    pub ema_params: ParamSet,
    pub val_curve: Vec<(usize, f64)>,
    pub stop_iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurninSummary {
    pub val_curve: Vec<(usize, f64)>,
    pub stop_iteration: usize,
}

impl BurninResult {
    pub fn summary(&self) -> BurninSummary {
        BurninSummary {
            val_curve: self.val_curve.clone(),
            stop_iteration: self.stop_iteration,
        }
    }

    /// Student and teacher initialization for self-training.
    pub fn initialization(&self) -> &ParamSet {
        &self.ema_params
    }
}

/// AP50 of `params` on a labeled dataset.
pub fn evaluate(params: &ParamSet, config: &DetectorConfig, dataset: &DetectionDataset) -> Result<EvalResult> {
    let preds: Vec<_> = dataset
        .records
        .par_iter()
        .map(|r| infer(params, r, config).map(|p| (r.id.clone(), p)))
        .collect::<Result<_>>()?;
    let gts: Vec<_> = dataset
        .records
        .iter()
        .map(|r| (r.id.clone(), r.annotations_or_empty().to_vec()))
        .collect();
    ap50(&preds, &gts, config.num_classes)
}

/// Source-only training config used during burn-in.
fn burn_in_config(config: &TrainConfig, robust: bool) -> TrainConfig {
    let mut c = config.clone();
    c.target_fraction = 0.0;
    c.target_supervised = false;
    c.distill = None;
    c.align = AlignConfig {
        image_level: false,
        instance_level: false,
        img2img: false,
        ..config.align.clone()
    };
    c.ema.enabled = robust;
    c.pipelines.source_alt = None;
    if robust {
        c.pipelines.source = c.pipelines.burn_in_strong.clone();
    }
    c.seed = derive_seed(config.seed, &[0xB0B]);
    c
}

/// Supervised pre-training on the source split according to `config.burn_in`.
pub fn burn_in(source: &DetectionDataset, config: &TrainConfig, init: ParamSet) -> Result<BurninResult> {
    config.validate()?;
    match config.burn_in {
        BurnIn::None => Ok(BurninResult {
            ema_params: init.clone(),
            params: init,
            val_curve: Vec::new(),
            stop_iteration: 0,
        }),
        BurnIn::Fixed { iterations } => {
            let bc = burn_in_config(config, false);
            let trainer = Trainer::new(&bc, source, source, None)?;
            let mut state = trainer.init_state(init, None)?;
            for _ in 0..iterations {
                trainer.step(&mut state)?;
            }
            Ok(BurninResult {
                ema_params: state.student.clone(),
                params: state.student,
                val_curve: Vec::new(),
                stop_iteration: iterations,
            })
        }
        BurnIn::Robust {
            max_iterations,
            patience,
            val_fraction,
        } => {
            let (train, val) = source.split_tail(val_fraction)?;
            let bc = burn_in_config(config, true);
            let trainer = Trainer::new(&bc, &train, &train, None)?;
            let mut state = trainer.init_state(init, None)?;
            let mut curve = Vec::new();
            let mut best: Option<(f64, ParamSet)> = None;
            let mut stale = 0;
            while state.iteration < max_iterations {
                trainer.step(&mut state)?;
                let it = state.iteration;
                if it % config.eval_every != 0 && it != max_iterations {
                    continue;
                }
                let ema = state.kept(&bc);
                let ap = evaluate(ema, &config.detector, &val)?.ap50;
                curve.push((it, ap));
                if best.as_ref().map_or(true, |(b, _)| ap > *b) {
                    best = Some((ap, ema.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= patience {
                        break;
                    }
                }
            }
            let ema_params = best.map(|(_, p)| p).unwrap_or_else(|| state.kept(&bc).clone());
            Ok(BurninResult {
                params: state.student,
                ema_params,
                val_curve: curve,
                stop_iteration: state.iteration,
            })
        }
    }
}
