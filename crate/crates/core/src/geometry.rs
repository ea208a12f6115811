//! Axis-aligned boxes in pixel coordinates, `(xmin, ymin, xmax, ymax)`.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2<S> {
    pub xmin: S,
    pub ymin: S,
    pub xmax: S,
    pub ymax: S,
}

impl<S: Scalar> Box2<S> {
    pub fn new(xmin: S, ymin: S, xmax: S, ymax: S) -> Self {
        Self {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn width(&self) -> S {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> S {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> S {
        self.width().max(S::zero()) * self.height().max(S::zero())
    }

    pub fn center(&self) -> (S, S) {
        let half = S::from_f64(0.5);
        (
            (self.xmin + self.xmax) * half,
            (self.ymin + self.ymax) * half,
        )
    }

    /// Strictly positive width and height.
    pub fn is_well_formed(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn contains_point(&self, x: S, y: S) -> bool {
        x >= self.xmin && x < self.xmax && y >= self.ymin && y < self.ymax
    }

    pub fn intersection_area(&self, other: &Self) -> S {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w > S::zero() && h > S::zero() {
            w * h
        } else {
            S::zero()
        }
    }

    pub fn iou(&self, other: &Self) -> S {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union > S::zero() {
            inter / union
        } else {
            S::zero()
        }
    }

    pub fn scaled(&self, s: S) -> Self {
        Self::new(self.xmin * s, self.ymin * s, self.xmax * s, self.ymax * s)
    }

    /// Mirror around the vertical axis of an image of the given width.
    pub fn hflipped(&self, image_width: S) -> Self {
        Self::new(
            image_width - self.xmax,
            self.ymin,
            image_width - self.xmin,
            self.ymax,
        )
    }

    pub fn clipped(&self, width: S, height: S) -> Self {
        Self::new(
            self.xmin.max(S::zero()).min(width),
            self.ymin.max(S::zero()).min(height),
            self.xmax.max(S::zero()).min(width),
            self.ymax.max(S::zero()).min(height),
        )
    }

    pub fn cast<T: Scalar>(&self) -> Box2<T> {
        Box2::new(
            T::from_f64(self.xmin.as_f64()),
            T::from_f64(self.ymin.as_f64()),
            T::from_f64(self.xmax.as_f64()),
            T::from_f64(self.ymax.as_f64()),
        )
    }
}
