use std::path::Path;

use super::dataset::Image;
use crate::error::{io_err, Error, Result};

/// Reads an 8-bit PNG (gray or RGB; alpha is dropped) into `[0, 1]` pixels.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (channels, raw, w, h) = match img.color().channel_count() {
        1 | 2 => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            (1, g.into_raw(), w, h)
        }
        _ => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            (3, rgb.into_raw(), w, h)
        }
    };
    let data = raw.into_iter().map(|v| f64::from(v) / 255.0).collect();
    Image::new(h as usize, w as usize, channels, data)
}

/// Writes pixels as 8-bit PNG. Values are rounded to the nearest level.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, color).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every pixel onto the 8-bit grid so PNG round-trips are exact.
pub(crate) fn snap_to_u8_grid(img: &mut Image) {
    for v in &mut img.data {
        *v = f64::from(quantize(*v)) / 255.0;
    }
}
