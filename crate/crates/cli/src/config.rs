use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use toml::{Table, Value};

use daod_core::datamodel::{ShiftParams, SyntheticConfig};
use daod_core::detector::DetectorConfig;
use daod_core::distill::EmaConfig;
use daod_core::trainer::{MethodPreset, TrainConfig};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DAOD_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub preset: MethodPreset,
    pub dataset: DatasetSection,
    /// Shared settings every preset builds on.
    pub base: TrainConfig,
    /// Dotted overrides applied to the resolved preset config.
    pub train: Table,
    pub compare: CompareSection,
    pub ablate: AblateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    /// Directory written by `generate-data`; when absent the synthetic
    /// benchmark is rendered in memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub presets: Vec<MethodPreset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Preset held fixed while one axis varies.
    pub base_preset: MethodPreset,
}

pub fn desk_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        image_size: 48,
        source_train: 120,
        target_train: 120,
        target_test: 150,
        target_train_labeled: 120,
        min_object_size: 10.0,
        max_object_size: 20.0,
        shift: ShiftParams {
            contrast_reduction: 0.9,
            noise_std: 0.03,
            blur_radius: 0,
            severity: [0.2, 1.0],
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn desk_detector() -> DetectorConfig {
    DetectorConfig {
        backbone_channels: vec![16, 16],
        feature_stride: 4,
        rpn_channels: 16,
        anchor_sizes: vec![12.0, 20.0],
        anchor_aspect_ratios: vec![1.0],
        rpn_samples: 64,
        roi_samples: 32,
        pre_nms_proposals: 200,
        train_proposals: 32,
        test_proposals: 32,
        roi_pool_size: 3,
        roi_hidden: 32,
        ..Default::default()
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig {
        detector: desk_detector(),
        total_batch: 8,
        learning_rate: 0.03,
        momentum: 0.9,
        iterations: 1500,
        eval_every: 50,
        ema: EmaConfig {
            alpha: 0.99,
            enabled: true,
        },
        ..Default::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("output"),
            seeds: vec![0, 1, 2],
            preset: MethodPreset::AldiPp,
            dataset: DatasetSection {
                seed: 0,
                path: None,
                synthetic: desk_synthetic(),
            },
            base: desk_train(),
            train: Table::new(),
            compare: CompareSection {
                presets: vec![
                    MethodPreset::SourceOnly,
                    MethodPreset::MeanTeacherBase,
                    MethodPreset::AldiPp,
                    MethodPreset::Oracle,
                ],
            },
            ablate: AblateSection {
                base_preset: MethodPreset::MeanTeacherBase,
            },
        }
    }
}

impl ExperimentConfig {
    /// Desk defaults, overlaid with an optional TOML file, then with
    /// `key=value` overrides.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut tree = to_table(&Self::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut tree, file);
        }
        for s in sets {
            let (key, value) = parse_assignment(s)?;
            set_dotted(&mut tree, &key, value)?;
        }
        let cfg: Self = from_table(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        self.dataset.synthetic.validate().context("dataset.synthetic")?;
        self.base.validate().context("base")?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&to_table(self)?)?)
    }

    /// Output directory, relative paths resolved under the output-root
    /// environment variable when it is set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Image side used for preset-dependent sizes such as the MIC patch.
    pub fn image_size(&self) -> usize {
        self.dataset.synthetic.image_size
    }

    /// Preset applied to the base settings, then the `train` overrides.
    pub fn resolve(&self, preset: MethodPreset, seed: u64) -> Result<TrainConfig> {
        let mut base = self.base.clone();
        base.seed = seed;
        let resolved = preset.apply(&base, self.image_size())?;
        let mut tree = to_table(&resolved)?;
        merge(&mut tree, self.train.clone());
        let cfg: TrainConfig = from_table(tree).context("in `train` overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    match Value::try_from(v)? {
        Value::Table(t) => Ok(t),
        other => Err(anyhow!("expected a table, found {}", other.type_str())),
    }
}

/// Deserializes with the dotted path of the first offending key in errors.
pub fn from_table<T: DeserializeOwned>(t: Table) -> Result<T> {
    serde_path_to_error::deserialize(Value::Table(t)).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("{path}: {}", e.into_inner())
    })
}

/// Recursive overlay; tables merge, everything else replaces.
pub fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override `{s}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{s}` has an empty key segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

pub fn set_dotted(tree: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = tree;
    for (i, p) in parts.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("{}: not a table", parts[..=i].join(".")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_literals() {
        assert_eq!(parse_assignment("a.b=0.25").unwrap(), ("a.b".into(), Value::Float(0.25)));
        assert_eq!(parse_assignment("x = 3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_assignment("p=aldi_pp").unwrap().1, Value::String("aldi_pp".into()));
        assert_eq!(parse_assignment("p=\"q\"").unwrap().1, Value::String("q".into()));
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("a..b=1").is_err());
    }

    #[test]
    fn merge_is_recursive() {
        let mut a: Table = "[s]\nx = 1\ny = 2".parse().unwrap();
        let b: Table = "[s]\ny = 3\nz = 4".parse().unwrap();
        merge(&mut a, b);
        assert_eq!(a.to_string(), "[s]\nx = 1\ny = 3\nz = 4\n");
    }
}
