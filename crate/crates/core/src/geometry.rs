//! Axis-aligned boxes in pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Corner-form box `(x1, y1, x2, y2)` with `x1 < x2` and `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    /// Validated constructor; rejects empty or inverted boxes and non-finite corners.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::invalid(format!(
                "box ({x1}, {y1}, {x2}, {y2}) violates x1 < x2, y1 < y2"
            )));
        }
        Ok(b)
    }

    /// Constructor for callers that already guarantee validity (decoded or clipped boxes).
    pub const fn new_unchecked(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::lit(0.5);
        Self {
            x1: cx - half * w,
            y1: cy - half * h,
            x2: cx + half * w,
            y2: cy + half * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
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
        let half = T::lit(0.5);
        (half * (self.x1 + self.x2), half * (self.y1 + self.y2))
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: T, height: T) -> bool {
        self.x1 >= T::zero() && self.y1 >= T::zero() && self.x2 <= width && self.y2 <= height
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing with positive area remains.
    pub fn clip(&self, width: T, height: T) -> Option<Self> {
        let c = Self {
            x1: self.x1.max(T::zero()).min(width),
            y1: self.y1.max(T::zero()).min(height),
            x2: self.x2.max(T::zero()).min(width),
            y2: self.y2.max(T::zero()).min(height),
        };
        c.is_valid().then_some(c)
    }

    pub fn scale(&self, sx: T, sy: T) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::lit(self.x1.as_f64()),
            y1: U::lit(self.y1.as_f64()),
            x2: U::lit(self.x2.as_f64()),
            y2: U::lit(self.y2.as_f64()),
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}
