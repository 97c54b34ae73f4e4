use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use daod_core::datamodel::{load_coco, make_synthetic_shift, save_coco};
use daod_core::trainer::dataset_fingerprint;
use daod_core::{DetectionDataset, Domain, DomainPair};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
const SPLITS: [&str; 4] = ["source_train", "target_train", "target_test", "target_train_labeled"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub images: usize,
    pub annotations: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// Hash of the generator settings and seed.
    pub spec_hash: String,
    /// Hash over the split fingerprints.
    pub content_hash: String,
    pub splits: BTreeMap<String, SplitEntry>,
}

impl Manifest {
    pub fn describe(cfg: &ExperimentConfig, pair: &DomainPair) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&cfg.dataset.synthetic)?);
        h.update(cfg.dataset.seed.to_le_bytes());
        let spec_hash = hex::encode(h.finalize());
        let mut splits = BTreeMap::new();
        let mut content = Sha256::new();
        for (name, ds) in named_splits(pair) {
            let fingerprint = dataset_fingerprint(ds);
            content.update(name.as_bytes());
            content.update(fingerprint.as_bytes());
            let annotations = ds.records.iter().map(|r| r.annotations_or_empty().len()).sum();
            splits.insert(
                name.to_string(),
                SplitEntry {
                    images: ds.len(),
                    annotations,
                    fingerprint,
                },
            );
        }
        Ok(Self {
            seed: cfg.dataset.seed,
            spec_hash,
            content_hash: hex::encode(content.finalize()),
            splits,
        })
    }
}

fn named_splits(pair: &DomainPair) -> Vec<(&'static str, &DetectionDataset)> {
    let mut v = vec![
        (SPLITS[0], &pair.source_train),
        (SPLITS[1], &pair.target_train),
        (SPLITS[2], &pair.target_test),
    ];
    if let Some(l) = &pair.target_train_labeled {
        v.push((SPLITS[3], l));
    }
    v
}

/// Where `generate-data` writes and where a configured dataset is read.
pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dataset.path.clone().unwrap_or_else(|| cfg.output_root().join("data"))
}

/// Renders the synthetic benchmark into COCO JSON plus PNG files.
pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<(PathBuf, Manifest)> {
    let dir = data_dir(cfg);
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", dir.display());
        }
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let pair = make_synthetic_shift(&cfg.dataset.synthetic, cfg.dataset.seed)?;
    for (name, ds) in named_splits(&pair) {
        save_coco(ds, &dir.join(name))?;
    }
    let manifest = Manifest::describe(cfg, &pair)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok((dir, manifest))
}

/// The configured domain pair: read from `dataset.path` when set, else
/// rendered in memory.
pub fn load_pair(cfg: &ExperimentConfig) -> Result<(DomainPair, Manifest)> {
    let pair = match &cfg.dataset.path {
        Some(dir) => read_pair(dir)?,
        None => make_synthetic_shift(&cfg.dataset.synthetic, cfg.dataset.seed)?,
    };
    let manifest = Manifest::describe(cfg, &pair)?;
    Ok((pair, manifest))
}

fn read_pair(dir: &Path) -> Result<DomainPair> {
    let load = |name: &str, domain, labeled| -> Result<DetectionDataset> {
        let d = dir.join(name);
        load_coco(&d.join("annotations.json"), &d, domain, labeled).with_context(|| format!("loading split {name}"))
    };
    let labeled_dir = dir.join(SPLITS[3]);
    let labeled = labeled_dir
        .exists()
        .then(|| load(SPLITS[3], Domain::Target, true))
        .transpose()?;
    Ok(DomainPair::new(
        load(SPLITS[0], Domain::Source, true)?,
        load(SPLITS[1], Domain::Target, false)?,
        load(SPLITS[2], Domain::Target, true)?,
        labeled,
    )?)
}
