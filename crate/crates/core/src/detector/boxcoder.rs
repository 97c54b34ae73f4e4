//! Box regression parameterization:
//! `(dcx / w_a, dcy / h_a, ln(w / w_a), ln(h / h_a))`.

use crate::datamodel::BoundingBox;
use crate::error::{Error, Result};

/// Caps the log-size deltas before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn encode_deltas(anchor: &BoundingBox, gt: &BoundingBox) -> Result<[f64; 4]> {
    if !(anchor.width() > 0.0 && anchor.height() > 0.0 && gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "cannot encode {gt:?} against {anchor:?}"
        )));
    }
    Ok(encode_unchecked(anchor, gt))
}

pub(crate) fn encode_unchecked(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; clips to `(width, height)` when bounds are given.
pub fn decode_deltas(anchor: &BoundingBox, deltas: &[f64; 4], bounds: Option<(f64, f64)>) -> Result<BoundingBox> {
    if !(anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(Error::InvalidGeometry(format!("anchor {anchor:?}")));
    }
    Ok(decode_unchecked(anchor, deltas, bounds))
}

pub(crate) fn decode_unchecked(anchor: &BoundingBox, d: &[f64; 4], bounds: Option<(f64, f64)>) -> BoundingBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    let b = BoundingBox::new_unchecked(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
    match bounds {
        Some((bw, bh)) => b.clip(bw, bh),
        None => b,
    }
}
