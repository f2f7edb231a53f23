//! Axis-aligned box arithmetic in normalized image coordinates.
//!
//! Boxes are stored as center/size (`cx, cy, w, h`), which is also what the
//! box head predicts. Corners are derived on demand and clipped to the unit
//! square before any area is computed, so a box hanging over the image edge
//! only counts the visible part.

use thiserror::Error;

use crate::scalar::Coord;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box {0} is outside the unit range: {1}")]
    OutOfRange(&'static str, String),
    #[error("degenerate box: x1 <= x0 or y1 <= y0")]
    DegenerateBox,
}

/// A box in normalized `cx, cy, w, h` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

/// Corner form `(x0, y0, x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Coord> NormBox<T> {
    /// Checked constructor: `0 <= cx, cy <= 1` and `0 < w, h <= 1`.
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !unit(cx) {
            return Err(GeometryError::OutOfRange("cx", format!("{cx:?}")));
        }
        if !unit(cy) {
            return Err(GeometryError::OutOfRange("cy", format!("{cy:?}")));
        }
        if !(unit(w) && w > T::zero()) {
            return Err(GeometryError::OutOfRange("w", format!("{w:?}")));
        }
        if !(unit(h) && h > T::zero()) {
            return Err(GeometryError::OutOfRange("h", format!("{h:?}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Unchecked constructor for values already known to be valid (e.g. sigmoid outputs).
    pub const fn new_unchecked(cx: T, cy: T, w: T, h: T) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_corners(&self) -> Corners<T> {
        let hw = self.w / T::two();
        let hh = self.h / T::two();
        Corners {
            x0: self.cx - hw,
            y0: self.cy - hh,
            x1: self.cx + hw,
            y1: self.cy + hh,
        }
    }

    pub fn from_corners(c: Corners<T>) -> Result<Self, GeometryError> {
        if c.x1 <= c.x0 || c.y1 <= c.y0 {
            return Err(GeometryError::DegenerateBox);
        }
        Self::new(
            (c.x0 + c.x1) / T::two(),
            (c.y0 + c.y1) / T::two(),
            c.x1 - c.x0,
            c.y1 - c.y0,
        )
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> NormBox<U> {
        NormBox {
            cx: f(self.cx),
            cy: f(self.cy),
            w: f(self.w),
            h: f(self.h),
        }
    }
}

impl<T: Coord> Corners<T> {
    pub fn clipped(&self) -> Self {
        Corners {
            x0: self.x0.clamp_unit(),
            y0: self.y0.clamp_unit(),
            x1: self.x1.clamp_unit(),
            y1: self.y1.clamp_unit(),
        }
    }

    /// Area, with inverted extents counted as zero.
    pub fn area(&self) -> T {
        let w = (self.x1 - self.x0).max_of(T::zero());
        let h = (self.y1 - self.y0).max_of(T::zero());
        w * h
    }
}

/// Intersection, union and enclosing areas of two boxes (clipped to the unit square).
fn areas<T: Coord>(a: &NormBox<T>, b: &NormBox<T>) -> (T, T, T) {
    let ca = a.to_corners().clipped();
    let cb = b.to_corners().clipped();
    let inter = Corners {
        x0: ca.x0.max_of(cb.x0),
        y0: ca.y0.max_of(cb.y0),
        x1: ca.x1.min_of(cb.x1),
        y1: ca.y1.min_of(cb.y1),
    }
    .area();
    let union = ca.area() + cb.area() - inter;
    let enclosing = Corners {
        x0: ca.x0.min_of(cb.x0),
        y0: ca.y0.min_of(cb.y0),
        x1: ca.x1.max_of(cb.x1),
        y1: ca.y1.max_of(cb.y1),
    }
    .area();
    (inter, union, enclosing)
}

/// Intersection over union. Zero when the union is empty.
pub fn iou<T: Coord>(a: &NormBox<T>, b: &NormBox<T>) -> T {
    let (inter, union, _) = areas(a, b);
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// IoU minus the fraction of the smallest enclosing box not covered by the union.
pub fn generalized_iou<T: Coord>(a: &NormBox<T>, b: &NormBox<T>) -> T {
    let (inter, union, enclosing) = areas(a, b);
    if enclosing <= T::zero() {
        return T::zero();
    }
    let iou = if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    };
    iou - (enclosing - union) / enclosing
}

/// Sum of absolute coordinate differences over `(cx, cy, w, h)`.
pub fn l1_distance<T: Coord>(a: &NormBox<T>, b: &NormBox<T>) -> T {
    a.cx.abs_diff(b.cx) + a.cy.abs_diff(b.cy) + a.w.abs_diff(b.w) + a.h.abs_diff(b.h)
}
