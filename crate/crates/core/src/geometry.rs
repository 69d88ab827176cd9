//! Axis-aligned box geometry.
//!
//! Coordinates are continuous: width is `x_max - x_min` with no pixel
//! correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("non-finite box {b:?}")));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::Data(format!("inverted box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() == 0.0 || self.height() == 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Center/log-size deltas that move `from` onto `to`.
///
/// Both boxes need positive width and height.
pub fn encode(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    let (fw, fh) = (from.width(), from.height());
    [
        (tx - fx) / fw,
        (ty - fy) / fh,
        (to.width() / fw).ln(),
        (to.height() / fh).ln(),
    ]
}

/// Inverse of [`encode`].
pub fn decode(from: &BBox, deltas: &[f64; 4]) -> BBox {
    let (fx, fy) = from.center();
    let (fw, fh) = (from.width(), from.height());
    BBox::from_center(
        fx + deltas[0] * fw,
        fy + deltas[1] * fh,
        fw * deltas[2].exp(),
        fh * deltas[3].exp(),
    )
}
