//! Axis-aligned boxes in continuous pixel coordinates.

use std::fmt;

use crate::error::{Error, Result};

/// Overlap threshold used for every hit test in labeling and evaluation.
pub const HIT_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Range(format!("non-finite box coordinates {b}")));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::Range(format!("inverted box {b}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Strict `iou > threshold`.
pub fn hits(candidate: &BBox, target: &BBox, threshold: f64) -> bool {
    iou(candidate, target) > threshold
}

pub fn max_iou_against<'a, I>(candidate: &BBox, targets: I) -> f64
where
    I: IntoIterator<Item = &'a BBox>,
{
    targets.into_iter().map(|t| iou(candidate, t)).fold(0.0, f64::max)
}
