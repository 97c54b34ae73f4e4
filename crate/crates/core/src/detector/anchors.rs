use super::config::DetectorConfig;
use crate::datamodel::BoundingBox;
use crate::error::Result;

/// Anchors laid over the feature map, ordered `(row, column, anchor)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub boxes: Vec<BoundingBox>,
    pub feature_h: usize,
    pub feature_w: usize,
    pub per_cell: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Feature map size for an image; the input is zero-padded up to a stride multiple.
pub fn feature_size(config: &DetectorConfig, image_h: usize, image_w: usize) -> (usize, usize) {
    (
        image_h.div_ceil(config.feature_stride),
        image_w.div_ceil(config.feature_stride),
    )
}

pub fn generate_anchors(config: &DetectorConfig, image_h: usize, image_w: usize) -> Result<AnchorGrid> {
    config.validate()?;
    let (fh, fw) = feature_size(config, image_h, image_w);
    let stride = config.feature_stride as f64;
    let shapes: Vec<(f64, f64)> = config
        .anchor_sizes
        .iter()
        .flat_map(|&s| {
            config.anchor_aspect_ratios.iter().map(move |&r| {
                let w = s / r.sqrt();
                (w, s * s / w)
            })
        })
        .collect();
    let mut boxes = Vec::with_capacity(fh * fw * shapes.len());
    for y in 0..fh {
        for x in 0..fw {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for &(w, h) in &shapes {
                boxes.push(BoundingBox::new_unchecked(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
            }
        }
    }
    Ok(AnchorGrid {
        boxes,
        feature_h: fh,
        feature_w: fw,
        per_cell: shapes.len(),
    })
}
