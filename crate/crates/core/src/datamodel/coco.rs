//! COCO-style JSON ingestion and export.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use super::dataset::{Annotation, DetectionDataset, Domain, ImageRecord};
use super::png::{read_png, write_png};
use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    #[serde(default)]
    pub width: Option<u64>,
    #[serde(default)]
    pub height: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// Loads a COCO annotation file. Record ids are the image file stems.
///
/// Category ids are mapped onto contiguous class indices in ascending id order.
/// With `labeled = false` every record carries `annotations: None`.
pub fn load_coco(
    annotation_file: &Path,
    image_root: &Path,
    domain: Domain,
    labeled: bool,
) -> Result<DetectionDataset> {
    let text = std::fs::read_to_string(annotation_file).map_err(io_err(annotation_file))?;
    let coco: CocoFile = serde_json::from_str(&text)?;

    let mut categories = coco.categories.clone();
    categories.sort_by_key(|c| c.id);
    let class_of: HashMap<u64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();
    let class_names = categories.iter().map(|c| c.name.clone()).collect();

    let index_of: HashMap<u64, usize> = coco
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id, i))
        .collect();
    let mut per_image: Vec<Vec<Annotation>> = vec![Vec::new(); coco.images.len()];
    for ann in &coco.annotations {
        let slot = *index_of.get(&ann.image_id).ok_or(Error::UnknownImageId {
            annotation_id: ann.id,
            image_id: ann.image_id,
        })?;
        let class_id = *class_of.get(&ann.category_id).ok_or_else(|| {
            Error::InvalidData(format!(
                "annotation {} has unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        per_image[slot].push(Annotation {
            bbox: BoundingBox::from_xywh(x, y, w, h)?,
            class_id,
        });
    }

    let mut records = Vec::with_capacity(coco.images.len());
    for (im, anns) in coco.images.iter().zip(per_image) {
        let path = image_root.join(&im.file_name);
        if !path.is_file() {
            return Err(Error::MissingImage {
                id: im.id.to_string(),
                path,
            });
        }
        let pixels = read_png(&path)?;
        let id = Path::new(&im.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| im.id.to_string());
        records.push(ImageRecord {
            id,
            pixels,
            domain,
            annotations: labeled.then_some(anns),
        });
    }
    DetectionDataset::new(records, labeled, class_names)
}

/// Builds the COCO document for a dataset. Image files are named `<id>.png`.
pub fn to_coco(dataset: &DetectionDataset) -> CocoFile {
    let mut annotations = Vec::new();
    let images = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let image_id = i as u64 + 1;
            for a in r.annotations_or_empty() {
                let bbox = a.bbox.to_xywh();
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id,
                    category_id: a.class_id as u64 + 1,
                    bbox,
                    area: Some(bbox[2] * bbox[3]),
                    iscrowd: Some(0),
                });
            }
            CocoImage {
                id: image_id,
                file_name: format!("{}.png", r.id),
                width: Some(r.pixels.width as u64),
                height: Some(r.pixels.height as u64),
            }
        })
        .collect();
    let categories = dataset
        .class_names
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i as u64 + 1,
            name: name.clone(),
        })
        .collect();
    CocoFile {
        images,
        annotations,
        categories,
    }
}

/// Writes `annotations.json` plus one PNG per record into `dir`.
pub fn save_coco(dataset: &DetectionDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in &dataset.records {
        write_png(&dir.join(format!("{}.png", r.id)), &r.pixels)?;
    }
    let path = dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&to_coco(dataset))?;
    std::fs::write(&path, json).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::dataset::Image;

    fn write_fixture(dir: &Path) -> std::path::PathBuf {
        for name in ["a", "b"] {
            write_png(&dir.join(format!("{name}.png")), &Image::filled(20, 24, 3, 0.5)).unwrap();
        }
        let json = r#"{
            "images": [{"id": 10, "file_name": "a.png"}, {"id": 11, "file_name": "b.png"}],
            "annotations": [
                {"id": 1, "image_id": 10, "category_id": 7, "bbox": [1, 2, 3, 4]},
                {"id": 2, "image_id": 10, "category_id": 3, "bbox": [5, 5, 2, 2]},
                {"id": 3, "image_id": 11, "category_id": 7, "bbox": [0, 0, 10, 10]}
            ],
            "categories": [{"id": 7, "name": "square"}, {"id": 3, "name": "disc"}]
        }"#;
        let path = dir.join("ann.json");
        std::fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn loads_counts_and_converts_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        let ds = load_coco(&path, dir.path(), Domain::Source, true).unwrap();
        assert_eq!(ds.len(), 2);
        let total: usize = ds.records.iter().map(|r| r.annotations_or_empty().len()).sum();
        assert_eq!(total, 3);
        assert_eq!(ds.class_names, vec!["disc", "square"]);
        let first = &ds.records[0].annotations_or_empty()[0];
        assert_eq!(first.bbox, BoundingBox::new(1.0, 2.0, 4.0, 6.0).unwrap());
        assert_eq!(first.class_id, 1);
    }

    #[test]
    fn unlabeled_drops_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        let ds = load_coco(&path, dir.path(), Domain::Target, false).unwrap();
        assert!(ds.records.iter().all(|r| r.annotations.is_none()));
        assert!(!ds.labeled);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        std::fs::remove_file(dir.path().join("b.png")).unwrap();
        match load_coco(&path, dir.path(), Domain::Source, true) {
            Err(Error::MissingImage { id, .. }) => assert_eq!(id, "11"),
            other => panic!("unexpected {other:?}"),
        }

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{ not json").unwrap();
        assert!(matches!(
            load_coco(&bad, dir.path(), Domain::Source, true),
            Err(Error::Json(_))
        ));

        let orphan = dir.path().join("orphan.json");
        std::fs::write(
            &orphan,
            r#"{"images": [], "annotations": [{"id": 4, "image_id": 99, "category_id": 1, "bbox": [0,0,1,1]}], "categories": [{"id": 1, "name": "x"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_coco(&orphan, dir.path(), Domain::Source, true),
            Err(Error::UnknownImageId { image_id: 99, .. })
        ));
    }
}
