use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use daod_core::align::{write_stylized_pair, TranslatedPair};
use daod_core::detector::DetectorConfig;
use daod_core::evalmetrics::{convergence_time, extract_features, frechet_dissimilarity, EvalResult, Pooling};
use daod_core::trainer::{evaluate, run_training, MethodPreset, RunOptions, TrainConfig, TrainingRun};
use daod_core::{Domain, DomainPair, ParamSet};

use crate::config::{to_table, ExperimentConfig};
use crate::data::Manifest;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Headline numbers of one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub final_ap50: f64,
    pub convergence_step: usize,
    pub frechet_image: f64,
    pub frechet_instance: f64,
    pub config_hash: String,
}

/// Everything a training command needs besides the train config itself.
pub struct Workspace<'a> {
    pub experiment: &'a ExperimentConfig,
    pub pair: &'a DomainPair,
    pub manifest: &'a Manifest,
    pub root: PathBuf,
}

impl<'a> Workspace<'a> {
    pub fn new(experiment: &'a ExperimentConfig, pair: &'a DomainPair, manifest: &'a Manifest) -> Self {
        Self {
            experiment,
            pair,
            manifest,
            root: experiment.output_root(),
        }
    }

    /// Hash of the resolved config, dataset content and code version.
    pub fn config_hash(&self, config: &TrainConfig) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config)?);
        h.update(self.manifest.content_hash.as_bytes());
        h.update(CODE_VERSION.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Experiment config that reproduces exactly `config` on this dataset.
    pub fn snapshot(&self, preset: MethodPreset, config: &TrainConfig) -> Result<String> {
        let mut e = self.experiment.clone();
        e.preset = preset;
        e.seeds = vec![config.seed];
        e.train = to_table(config)?;
        e.to_toml()
    }

    fn translated(&self, config: &TrainConfig) -> Result<Option<TranslatedPair>> {
        if !config.align.img2img {
            return Ok(None);
        }
        let dir = self.root.join("translated").join(&self.manifest.content_hash[..16]);
        let shift = &self.experiment.dataset.synthetic.shift;
        Ok(Some(write_stylized_pair(
            &dir,
            &self.pair.source_train,
            &self.pair.target_train,
            shift,
            self.experiment.dataset.seed,
        )?))
    }

    /// Trains into `dir`, writing checkpoints, CSV logs, final parameters,
    /// the config snapshot and a summary. Returns `None` when stopped early.
    pub fn train_into(
        &self,
        dir: &Path,
        label: &str,
        preset: MethodPreset,
        config: &TrainConfig,
        resume: bool,
        stop_after: Option<usize>,
    ) -> Result<Option<RunSummary>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(CONFIG_SNAPSHOT), self.snapshot(preset, config)?)?;
        let options = RunOptions {
            checkpoint_dir: Some(dir.join("checkpoint")),
            resume,
            stop_after,
            burn_in_cache: Some(self.root.join("burn_in_cache")),
            translated: self.translated(config)?,
        };
        let run = run_training(config, self.pair, &options)?;
        if !run.completed {
            info!("{label}: stopped after iteration {}", run.loss_log.len());
            return Ok(None);
        }
        let summary = self.summarize(label, config, &run)?;
        fs::write(dir.join("loss.csv"), run.loss_csv()?)?;
        fs::write(dir.join("metrics.csv"), run.metric_csv()?)?;
        run.final_teacher.save(&dir.join("final_teacher.params"))?;
        run.final_student.save(&dir.join("final_student.params"))?;
        if let Some(b) = &run.burn_in {
            fs::write(dir.join("burn_in.json"), serde_json::to_string_pretty(b)?)?;
        }
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
        info!("{label}: AP50 {:.4}", summary.final_ap50);
        Ok(Some(summary))
    }

    fn summarize(&self, label: &str, config: &TrainConfig, run: &TrainingRun) -> Result<RunSummary> {
        let (fi, fn_) = frechet_pair(&run.final_teacher, &config.detector, self.pair)?;
        Ok(RunSummary {
            label: label.to_string(),
            seed: config.seed,
            final_ap50: run.final_ap50().unwrap_or(0.0),
            convergence_step: convergence_time(&run.metric_curve)?,
            frechet_image: fi,
            frechet_instance: fn_,
            config_hash: self.config_hash(config)?,
        })
    }

    /// Trains under `cache/<hash>` unless a finished run is already there.
    pub fn cached_run(&self, label: &str, preset: MethodPreset, config: &TrainConfig) -> Result<RunSummary> {
        let hash = self.config_hash(config)?;
        let dir = self.root.join("cache").join(&hash);
        let path = dir.join(SUMMARY_FILE);
        if path.exists() {
            let mut s: RunSummary = serde_json::from_slice(&fs::read(&path)?)?;
            info!("{label} seed {}: reusing {}", config.seed, dir.display());
            s.label = label.to_string();
            return Ok(s);
        }
        info!("{label} seed {}: training in {}", config.seed, dir.display());
        match self.train_into(&dir, label, preset, config, true, None)? {
            Some(s) => Ok(s),
            None => bail!("run {label} did not complete"),
        }
    }
}

/// Fréchet dissimilarity between source-train and target-test features,
/// image-level and instance-level.
pub fn frechet_pair(params: &ParamSet, config: &DetectorConfig, pair: &DomainPair) -> Result<(f64, f64)> {
    let mut out = [0.0; 2];
    for (slot, pooling) in [Pooling::ImageLevel, Pooling::InstanceLevel].into_iter().enumerate() {
        let a = extract_features(params, config, &pair.source_train.records, pooling, Domain::Source)?;
        let b = extract_features(params, config, &pair.target_test.records, pooling, Domain::Target)?;
        out[slot] = frechet_dissimilarity(&a, &b)?;
    }
    Ok((out[0], out[1]))
}

pub fn evaluate_params(params: &ParamSet, config: &DetectorConfig, pair: &DomainPair) -> Result<EvalResult> {
    Ok(evaluate(params, config, &pair.target_test)?)
}
