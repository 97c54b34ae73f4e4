use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use crate::error::{Error, Result};

/// Minimum accepted image side in pixels.
pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Label used by the domain discriminator (source = 0, target = 1).
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Dense H x W x C image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self {
            height,
            width,
            channels,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidData(format!(
                "image {}x{} smaller than {MIN_IMAGE_SIDE}px",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidData(format!(
                "unsupported channel count {}",
                self.channels
            )));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::InvalidData("pixel buffer length mismatch".into()));
        }
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("pixel values outside [0, 1]".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Channel-first copy, as consumed by the detector backbone.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Image,
    pub domain: Domain,
    pub annotations: Option<Vec<Annotation>>,
}

impl ImageRecord {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.pixels.validate()?;
        if let Some(anns) = &self.annotations {
            let (w, h) = (self.pixels.width as f64, self.pixels.height as f64);
            for a in anns {
                a.bbox.validate()?;
                if a.class_id >= num_classes {
                    return Err(Error::InvalidData(format!(
                        "image `{}`: class id {} out of range for {num_classes} classes",
                        self.id, a.class_id
                    )));
                }
                let b = &a.bbox;
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                    return Err(Error::InvalidData(format!(
                        "image `{}`: box {b:?} outside image",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn annotations_or_empty(&self) -> &[Annotation] {
        self.annotations.as_deref().unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionDataset {
    pub records: Vec<ImageRecord>,
    pub labeled: bool,
    pub class_names: Vec<String>,
}

impl DetectionDataset {
    pub fn new(records: Vec<ImageRecord>, labeled: bool, class_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            records,
            labeled,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn domain(&self) -> Option<Domain> {
        self.records.first().map(|r| r.domain)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(domain) = self.domain() {
            if self.records.iter().any(|r| r.domain != domain) {
                return Err(Error::InvalidData("mixed domain tags in dataset".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateImageId(r.id.clone()));
            }
            if self.labeled && r.annotations.is_none() {
                return Err(Error::InvalidData(format!(
                    "labeled dataset record `{}` has no annotation list",
                    r.id
                )));
            }
            r.validate(self.num_classes())?;
        }
        Ok(())
    }

    /// Copy with annotations removed.
    pub fn unlabeled(&self) -> Self {
        Self {
            records: self
                .records
                .iter()
                .map(|r| ImageRecord {
                    annotations: None,
                    ..r.clone()
                })
                .collect(),
            labeled: false,
            class_names: self.class_names.clone(),
        }
    }

    /// Mean pixel value over the whole dataset.
    pub fn mean_pixel(&self) -> f64 {
        let (sum, n) = self.records.iter().fold((0.0, 0usize), |(s, n), r| {
            (s + r.pixels.data.iter().sum::<f64>(), n + r.pixels.data.len())
        });
        if n == 0 {
            0.5
        } else {
            sum / n as f64
        }
    }

    /// Splits off the trailing `fraction` of records (at least one) as a held-out set.
    pub fn split_tail(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::Config(format!("held-out fraction {fraction} not in (0, 1)")));
        }
        let n = self.records.len();
        let held = ((n as f64 * fraction).round() as usize).max(1);
        if held >= n {
            return Err(Error::Config("dataset too small to carve a held-out split".into()));
        }
        let (a, b) = self.records.split_at(n - held);
        Ok((
            Self {
                records: a.to_vec(),
                ..self.clone_empty()
            },
            Self {
                records: b.to_vec(),
                ..self.clone_empty()
            },
        ))
    }

    fn clone_empty(&self) -> Self {
        Self {
            records: Vec::new(),
            labeled: self.labeled,
            class_names: self.class_names.clone(),
        }
    }
}

/// The four splits of a domain-adaptation benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source_train: DetectionDataset,
    pub target_train: DetectionDataset,
    pub target_test: DetectionDataset,
    pub target_train_labeled: Option<DetectionDataset>,
}

impl DomainPair {
    pub fn new(
        source_train: DetectionDataset,
        target_train: DetectionDataset,
        target_test: DetectionDataset,
        target_train_labeled: Option<DetectionDataset>,
    ) -> Result<Self> {
        let pair = Self {
            source_train,
            target_train,
            target_test,
            target_train_labeled,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.source_train.labeled {
            return Err(Error::InvalidData("source_train must be labeled".into()));
        }
        if self.target_train.labeled {
            return Err(Error::InvalidData("target_train must be unlabeled".into()));
        }
        if !self.target_test.labeled {
            return Err(Error::InvalidData("target_test must be labeled".into()));
        }
        let names = &self.source_train.class_names;
        let mut splits = vec![&self.target_train, &self.target_test];
        if let Some(l) = &self.target_train_labeled {
            if !l.labeled {
                return Err(Error::InvalidData("target_train_labeled must be labeled".into()));
            }
            splits.push(l);
        }
        if splits.iter().any(|s| &s.class_names != names) {
            return Err(Error::InvalidData("class names differ across splits".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.source_train.num_classes()
    }
}

/// Scored, class-labeled detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

impl Prediction {
    pub fn is_valid(&self) -> bool {
        self.bbox.is_valid() && (0.0..=1.0).contains(&self.score)
    }
}
