//! Axis-aligned boxes in corner form and intersection-over-union.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinate is not finite: [{x1}, {y1}, {x2}, {y2}]")]
    NonFinite { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box has negative extent: [{x1}, {y1}, {x2}, {y2}]")]
    NegativeExtent { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Axis-aligned box `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`.
///
/// Construction validates the corners, so every `BBox` value in the program
/// is well formed and [`iou`] never has to fail. Zero-area boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox<T: Scalar = f64> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeometryError> {
        let raw = || (x1.to_f64_lossy(), y1.to_f64_lossy(), x2.to_f64_lossy(), y2.to_f64_lossy());
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            let (x1, y1, x2, y2) = raw();
            return Err(GeometryError::NonFinite { x1, y1, x2, y2 });
        }
        if x1 > x2 || y1 > y2 {
            let (x1, y1, x2, y2) = raw();
            return Err(GeometryError::NegativeExtent { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO's `[x, y, width, height]` layout.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn corners(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn x1(&self) -> T {
        self.x1
    }
    pub fn y1(&self) -> T {
        self.y1
    }
    pub fn x2(&self) -> T {
        self.x2
    }
    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::lit(2.0);
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    pub fn translate(&self, dx: T, dy: T) -> Result<Self, GeometryError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Scales all coordinates about the origin. `s` must be non-negative.
    pub fn scale(&self, s: T) -> Result<Self, GeometryError> {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: T, height: T) -> Self {
        let cx = |v: T| v.max(T::zero()).min(width);
        let cy = |v: T| v.max(T::zero()).min(height);
        Self { x1: cx(self.x1), y1: cy(self.y1), x2: cx(self.x2), y2: cy(self.y2) }
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Converts the coordinate type, e.g. `f64` boxes loaded from JSON into `f32`.
    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        BBox { x1: c(self.x1), y1: c(self.y1), x2: c(self.x2), y2: c(self.y2) }
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for BBox<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw<T> {
            x1: T,
            y1: T,
            x2: T,
            y2: T,
        }
        let r = Raw::<T>::deserialize(d)?;
        BBox::new(r.x1, r.y1, r.x2, r.y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
///
/// When the union is empty (both boxes degenerate) the result is 1 for
/// identical boxes and 0 otherwise.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return if a == b { T::one() } else { T::zero() };
    }
    (inter / union).min(T::one()).max(T::zero())
}
