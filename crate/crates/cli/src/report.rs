use std::fmt::Write as _;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use serde::Serialize;

use daod_core::distill::{DistillConfig, DistillMode};
use daod_core::trainer::{target_augmentations, BurnIn, MethodPreset, TeacherUpdate, TrainConfig, BURN_IN_FRACTION};

use crate::runs::{RunSummary, Workspace};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub reference: bool,
    pub seed: u64,
    pub ap50: f64,
    pub convergence_step: usize,
    pub frechet_image: f64,
    pub frechet_instance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub reference: bool,
    pub runs: usize,
    pub ap50_mean: f64,
    pub ap50_std: f64,
    pub convergence_mean: f64,
    pub frechet_image_mean: f64,
    pub frechet_instance_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, summary: &RunSummary, reference: bool) {
        self.rows.push(ReportRow {
            method: summary.label.clone(),
            reference,
            seed: summary.seed,
            ap50: summary.final_ap50,
            convergence_step: summary.convergence_step,
            frechet_image: summary.frechet_image,
            frechet_instance: summary.frechet_instance,
        });
    }

    /// Mean and sample standard deviation per method, in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut methods: Vec<(&str, bool)> = Vec::new();
        for r in &self.rows {
            if !methods.iter().any(|(m, _)| *m == r.method) {
                methods.push((&r.method, r.reference));
            }
        }
        methods
            .into_iter()
            .map(|(m, reference)| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.method == m).collect();
                let ap: Vec<f64> = rows.iter().map(|r| r.ap50).collect();
                let (mean, std) = mean_std(&ap);
                let avg = |f: fn(&ReportRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
                Aggregate {
                    method: m.to_string(),
                    reference,
                    runs: rows.len(),
                    ap50_mean: mean,
                    ap50_std: std,
                    convergence_mean: avg(|r| r.convergence_step as f64),
                    frechet_image_mean: avg(|r| r.frechet_image),
                    frechet_instance_mean: avg(|r| r.frechet_instance),
                }
            })
            .collect()
    }

    pub fn mean_ap50(&self, method: &str) -> Option<f64> {
        self.aggregates().into_iter().find(|a| a.method == method).map(|a| a.ap50_mean)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut s = format!("# {title}\n\n");
        s.push_str("| method | AP50 (mean ± std) | runs | convergence step | d_F image | d_F instance |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for a in self.aggregates() {
            let name = if a.reference { format!("{} (reference)", a.method) } else { a.method.clone() };
            let _ = writeln!(
                s,
                "| {name} | {:.1} ± {:.1} | {} | {:.0} | {:.3} | {:.3} |",
                100.0 * a.ap50_mean,
                100.0 * a.ap50_std,
                a.runs,
                a.convergence_mean,
                a.frechet_image_mean,
                a.frechet_instance_mean
            );
        }
        s
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Every preset in the config over every seed.
pub fn compare(ws: &Workspace<'_>) -> Result<Report> {
    let exp = ws.experiment;
    if exp.compare.presets.contains(&MethodPreset::Oracle) && ws.pair.target_train_labeled.is_none() {
        bail!("the oracle preset needs a labeled target training split");
    }
    let mut report = Report::default();
    for &preset in &exp.compare.presets {
        for &seed in &exp.seeds {
            let config = exp.resolve(preset, seed)?;
            let summary = ws.cached_run(preset.name(), preset, &config)?;
            report.push(&summary, preset.is_reference());
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AblationAxis {
    BatchRatio,
    TargetAugs,
    DistillMode,
    BurnIn,
    Alignment,
    TeacherUpdate,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::BatchRatio => "batch_ratio",
            AblationAxis::TargetAugs => "target_augs",
            AblationAxis::DistillMode => "distill_mode",
            AblationAxis::BurnIn => "burn_in",
            AblationAxis::Alignment => "alignment",
            AblationAxis::TeacherUpdate => "teacher_update",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> &'static [&'static str] {
        match self {
            AblationAxis::BatchRatio => &["0", "0.25", "0.5", "1.0"],
            AblationAxis::TargetAugs => &["weak", "strong", "mic"],
            AblationAxis::DistillMode => &["hard", "soft"],
            AblationAxis::BurnIn => &["none", "fixed", "robust"],
            AblationAxis::Alignment => &["none", "image", "instance", "image_instance"],
            AblationAxis::TeacherUpdate => &["none", "student_is_teacher", "ema"],
        }
    }

    /// `config` with this axis set to `value`.
    pub fn apply(self, config: &TrainConfig, value: &str, image_size: usize) -> Result<TrainConfig> {
        let mut c = config.clone();
        let bad = || anyhow!("invalid {} value `{value}`", self.name());
        match self {
            AblationAxis::BatchRatio => c.target_fraction = f64::from_str(value).map_err(|_| bad())?,
            AblationAxis::TargetAugs => c.pipelines.target = target_augmentations(value, image_size)?,
            AblationAxis::DistillMode => {
                let mode = match value {
                    "hard" => DistillMode::Hard,
                    "soft" => DistillMode::Soft,
                    _ => return Err(bad()),
                };
                c.distill = Some(DistillConfig {
                    mode,
                    ..c.distill.clone().unwrap_or_default()
                });
            }
            AblationAxis::BurnIn => {
                let budget = ((c.iterations as f64 * BURN_IN_FRACTION).round() as usize).max(1);
                c.burn_in = match value {
                    "none" => BurnIn::None,
                    "fixed" => BurnIn::Fixed { iterations: budget },
                    "robust" => BurnIn::Robust {
                        max_iterations: budget,
                        patience: 5,
                        val_fraction: 0.1,
                    },
                    _ => return Err(bad()),
                };
            }
            AblationAxis::Alignment => {
                let (image, instance) = match value {
                    "none" => (false, false),
                    "image" => (true, false),
                    "instance" => (false, true),
                    "image_instance" => (true, true),
                    _ => return Err(bad()),
                };
                c.align.image_level = image;
                c.align.instance_level = instance;
            }
            AblationAxis::TeacherUpdate => {
                c.teacher_update = match value {
                    "none" => TeacherUpdate::None,
                    "student_is_teacher" => TeacherUpdate::StudentIsTeacher,
                    "ema" => TeacherUpdate::Ema,
                    _ => return Err(bad()),
                };
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// One run per value and seed, everything else held at the base preset.
pub fn ablate(ws: &Workspace<'_>, axis: AblationAxis, values: &[String]) -> Result<Report> {
    let exp = ws.experiment;
    let preset = exp.ablate.base_preset;
    let mut report = Report::default();
    for value in values {
        for &seed in &exp.seeds {
            let config = axis.apply(&exp.resolve(preset, seed)?, value, exp.image_size())?;
            let label = format!("{}={value}", axis.name());
            let summary = ws.cached_run(&label, preset, &config)?;
            report.push(&summary, false);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
