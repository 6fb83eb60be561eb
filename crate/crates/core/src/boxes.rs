//! Axis-aligned boxes, IoU and the center/log-size delta parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{reject, Result};

/// Largest log-scale delta accepted by decoding, `ln(1000/16)`.
pub fn max_log_delta() -> f64 {
    (1000.0f64 / 16.0).ln()
}

/// Rectangle in image pixels with continuous coordinates (width = x2 − x1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn hflip(&self, width: f64) -> BBox {
        BBox::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

fn check_anchor(a: &BBox) -> Result<()> {
    if !(a.width() > 0.0 && a.height() > 0.0 && a.is_valid()) {
        reject!("anchor {a:?} has non-positive size");
    }
    Ok(())
}

/// `(tx, ty, tw, th)` of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    check_anchor(anchor)?;
    if !(gt.width() > 0.0 && gt.height() > 0.0 && gt.is_valid()) {
        reject!("target box {gt:?} has non-positive size");
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([(gx - ax) / aw, (gy - ay) / ah, (gt.width() / aw).ln(), (gt.height() / ah).ln()])
}

/// Inverse of [`encode_box`]; log-size deltas are clamped to
/// [`max_log_delta`] so extreme predictions stay finite.
pub fn decode_box(anchor: &BBox, d: &[f64; 4]) -> Result<BBox> {
    check_anchor(anchor)?;
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let m = max_log_delta();
    let (dw, dh) = (d[2].min(m), d[3].min(m));
    Ok(BBox::from_center(ax + d[0] * aw, ay + d[1] * ah, aw * dw.exp(), ah * dh.exp()))
}

/// [`decode_box`] followed by clipping to a `width × height` image.
pub fn decode_clipped(anchor: &BBox, d: &[f64; 4], width: f64, height: f64) -> Result<BBox> {
    Ok(decode_box(anchor, d)?.clip(width, height))
}
