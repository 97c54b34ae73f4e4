use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::burnin::{burn_in, evaluate, BurninResult, BurninSummary};
use super::config::{BurnIn, TrainConfig};
use super::presets::MethodPreset;
use super::step::{LossBundle, StepOutput, TrainState, Trainer};
use crate::align::TranslatedPair;
use crate::datamodel::{DetectionDataset, DomainPair};
use crate::detector::init_params;
use crate::error::{io_err, Error, Result};
use crate::params::ParamSet;

/// One logged training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub losses: Vec<(String, f64)>,
    pub total: f64,
}

impl From<StepOutput> for IterationLog {
    fn from(s: StepOutput) -> Self {
        let LossBundle { terms, total } = s.losses;
        Self {
            iteration: s.iteration,
            n_source: s.n_source,
            n_target: s.n_target,
            losses: terms,
            total,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRun {
    pub config: TrainConfig,
    /// The kept model: the teacher when one is maintained, else the student.
    pub final_teacher: ParamSet,
    pub final_student: ParamSet,
    pub metric_curve: Vec<(usize, f64)>,
    pub loss_log: Vec<IterationLog>,
    pub burn_in: Option<BurninSummary>,
    /// False when the run stopped early through `RunOptions::stop_after`.
    pub completed: bool,
}

impl TrainingRun {
    pub fn final_ap50(&self) -> Option<f64> {
        self.metric_curve.last().map(|(_, v)| *v)
    }

    /// `iteration,name,value` rows, including per-iteration batch counts.
    pub fn loss_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "name", "value"])?;
        for l in &self.loss_log {
            let it = l.iteration.to_string();
            w.write_record([it.as_str(), "batch_source", &l.n_source.to_string()])?;
            w.write_record([it.as_str(), "batch_target", &l.n_target.to_string()])?;
            for (n, v) in &l.losses {
                w.write_record([it.as_str(), n, &v.to_string()])?;
            }
            w.write_record([it.as_str(), "total", &l.total.to_string()])?;
        }
        finish_csv(w)
    }

    /// `iteration,name,value` rows of the target AP50 curve.
    pub fn metric_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "name", "value"])?;
        for (it, v) in &self.metric_curve {
            w.write_record([it.to_string(), "target_ap50".into(), v.to_string()])?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for checkpoints, written every `eval_every` iterations.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `checkpoint_dir` if there is one.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many iterations are complete.
    pub stop_after: Option<usize>,
    /// Directory for reusing burn-in results across runs.
    pub burn_in_cache: Option<PathBuf>,
    pub translated: Option<TranslatedPair>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    iteration: usize,
    metric_curve: Vec<(usize, f64)>,
    loss_log: Vec<IterationLog>,
    burn_in: Option<BurninSummary>,
}

const STATE_FILE: &str = "state.json";

fn save_optional(dir: &Path, name: &str, p: &Option<ParamSet>) -> Result<()> {
    let path = dir.join(name);
    match p {
        Some(p) => p.save(&path),
        None if path.exists() => fs::remove_file(&path).map_err(io_err(&path)),
        None => Ok(()),
    }
}

fn load_optional(dir: &Path, name: &str) -> Result<Option<ParamSet>> {
    let path = dir.join(name);
    if path.exists() {
        ParamSet::load(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn save_checkpoint(dir: &Path, state: &TrainState, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    state.student.save(&dir.join("student.params"))?;
    state.velocity.save(&dir.join("velocity.params"))?;
    save_optional(dir, "teacher.params", &state.teacher)?;
    save_optional(dir, "disc_img.params", &state.disc_img)?;
    save_optional(dir, "disc_img_velocity.params", &state.disc_img_velocity)?;
    save_optional(dir, "disc_ins.params", &state.disc_ins)?;
    save_optional(dir, "disc_ins_velocity.params", &state.disc_ins_velocity)?;
    let tmp = dir.join("state.json.tmp");
    fs::write(&tmp, serde_json::to_vec(meta)?).map_err(io_err(&tmp))?;
    let dst = dir.join(STATE_FILE);
    fs::rename(&tmp, &dst).map_err(io_err(&dst))
}

fn load_checkpoint(dir: &Path) -> Result<Option<(TrainState, CheckpointMeta)>> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
    let state = TrainState {
        student: ParamSet::load(&dir.join("student.params"))?,
        velocity: ParamSet::load(&dir.join("velocity.params"))?,
        teacher: load_optional(dir, "teacher.params")?,
        disc_img: load_optional(dir, "disc_img.params")?,
        disc_img_velocity: load_optional(dir, "disc_img_velocity.params")?,
        disc_ins: load_optional(dir, "disc_ins.params")?,
        disc_ins_velocity: load_optional(dir, "disc_ins_velocity.params")?,
        iteration: meta.iteration,
    };
    Ok(Some((state, meta)))
}

/// Content hash of a dataset's records.
pub fn dataset_fingerprint(ds: &DetectionDataset) -> String {
    let mut h = Sha256::new();
    for r in &ds.records {
        h.update(r.id.as_bytes());
        h.update([0u8]);
        for v in &r.pixels.data {
            h.update(v.to_le_bytes());
        }
        for a in r.annotations_or_empty() {
            for v in [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2] {
                h.update(v.to_le_bytes());
            }
            h.update((a.class_id as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Everything burn-in depends on, hashed.
fn burn_in_key(config: &TrainConfig, source: &DetectionDataset) -> Result<String> {
    let relevant = serde_json::json!({
        "burn_in": config.burn_in,
        "detector": config.detector,
        "total_batch": config.total_batch,
        "learning_rate": config.learning_rate,
        "momentum": config.momentum,
        "grad_clip": config.grad_clip,
        "ema": config.ema,
        "source": config.pipelines.source,
        "strong": config.pipelines.burn_in_strong,
        "align": config.align,
        "seed": config.seed,
        "eval_every": config.eval_every,
    });
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&relevant)?);
    h.update(dataset_fingerprint(source).as_bytes());
    Ok(hex::encode(h.finalize()))
}

fn cached_burn_in(config: &TrainConfig, source: &DetectionDataset, cache: Option<&Path>) -> Result<BurninResult> {
    let init = init_params(&config.detector, config.seed)?;
    let Some(cache) = cache.filter(|_| !matches!(config.burn_in, BurnIn::None)) else {
        return burn_in(source, config, init);
    };
    let dir = cache.join(burn_in_key(config, source)?);
    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        let bytes = fs::read(&summary_path).map_err(io_err(&summary_path))?;
        let s: BurninSummary = serde_json::from_slice(&bytes)?;
        return Ok(BurninResult {
            params: ParamSet::load(&dir.join("params.params"))?,
            ema_params: ParamSet::load(&dir.join("ema.params"))?,
            val_curve: s.val_curve,
            stop_iteration: s.stop_iteration,
        });
    }
    let r = burn_in(source, config, init)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    r.params.save(&dir.join("params.params"))?;
    r.ema_params.save(&dir.join("ema.params"))?;
    fs::write(&summary_path, serde_json::to_vec(&r.summary())?).map_err(io_err(&summary_path))?;
    Ok(r)
}

/// Burn-in followed by self-training, evaluating the kept model on
/// `target_test` every `eval_every` iterations and at the end.
pub fn run_training(config: &TrainConfig, pair: &DomainPair, options: &RunOptions) -> Result<TrainingRun> {
    config.validate()?;
    pair.validate()?;
    let target = if config.target_supervised {
        pair.target_train_labeled
            .as_ref()
            .ok_or_else(|| Error::Config("supervised target training needs target_train_labeled".into()))?
    } else {
        &pair.target_train
    };
    let trainer = Trainer::new(config, &pair.source_train, target, options.translated.as_ref())?;

    let resumed = match (&options.checkpoint_dir, options.resume) {
        (Some(dir), true) => load_checkpoint(dir)?,
        _ => None,
    };
    let (mut state, mut curve, mut log, burn) = match resumed {
        Some((state, meta)) => {
            if meta.config != *config {
                return Err(Error::Checkpoint("checkpoint was written with a different config".into()));
            }
            (state, meta.metric_curve, meta.loss_log, meta.burn_in)
        }
        None => {
            let b = cached_burn_in(config, &pair.source_train, options.burn_in_cache.as_deref())?;
            let init = b.initialization().clone();
            let summary = (!matches!(config.burn_in, BurnIn::None)).then(|| b.summary());
            (trainer.init_state(init.clone(), Some(init))?, Vec::new(), Vec::new(), summary)
        }
    };

    let checkpoint = |state: &TrainState, curve: &Vec<(usize, f64)>, log: &Vec<IterationLog>| -> Result<()> {
        if let Some(dir) = &options.checkpoint_dir {
            let meta = CheckpointMeta {
                config: config.clone(),
                iteration: state.iteration,
                metric_curve: curve.clone(),
                loss_log: log.clone(),
                burn_in: burn.clone(),
            };
            save_checkpoint(dir, state, &meta)?;
        }
        Ok(())
    };

    while state.iteration < config.iterations {
        if options.stop_after == Some(state.iteration) {
            checkpoint(&state, &curve, &log)?;
            return Ok(TrainingRun {
                config: config.clone(),
                final_teacher: state.kept(&config).clone(),
                final_student: state.student.clone(),
                metric_curve: curve,
                loss_log: log,
                burn_in: burn.clone(),
                completed: false,
            });
        }
        let out = trainer.step(&mut state)?;
        log.push(out.into());
        let it = state.iteration;
        if it % config.eval_every == 0 || it == config.iterations {
            let ap = evaluate(state.kept(&config), &config.detector, &pair.target_test)?.ap50;
            log::debug!("iteration {it}: target AP50 {ap:.4}");
            curve.push((it, ap));
            if it % config.eval_every == 0 {
                checkpoint(&state, &curve, &log)?;
            }
        }
    }
    checkpoint(&state, &curve, &log)?;
    Ok(TrainingRun {
        config: config.clone(),
        final_teacher: state.kept(&config).clone(),
        final_student: state.student,
        metric_curve: curve,
        loss_log: log,
        burn_in: burn,
        completed: true,
    })
}

/// Resolves `preset` over `base` and runs it.
pub fn run_preset(
    preset: MethodPreset,
    base: &TrainConfig,
    pair: &DomainPair,
    options: &RunOptions,
) -> Result<TrainingRun> {
    let size = pair.source_train.records.first().map_or(64, |r| r.pixels.height.max(r.pixels.width));
    let config = preset.apply(base, size)?;
    run_training(&config, pair, options)
}
