//! Rotated BEV box algebra: boxes, IoU, NMS, the anchor lattice and rigid
//! 2-D transforms.

mod anchors;
mod iou;
mod nms;
mod transform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{normalize_angle, Real};

pub use anchors::{anchor_index_to_grid, decode_box, encode_box, AnchorGrid, AnchorTemplate};
pub use iou::{polygon_area, rotated_iou};
pub use nms::nms;
pub use transform::{se2_transform, transform_point, Rigid};

/// Oriented rectangle on the ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBev<T> {
    pub cx: T,
    pub cy: T,
    pub length: T,
    pub width: T,
    pub yaw: T,
}

impl<T: Real> BoxBev<T> {
    /// Validates sizes and wraps `yaw` into `[-pi, pi)`.
    pub fn new(cx: T, cy: T, length: T, width: T, yaw: T) -> Result<Self> {
        let b = BoxBev {
            cx,
            cy,
            length,
            width,
            yaw: normalize_angle(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.length, self.width, self.yaw]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.length <= T::zero() || self.width <= T::zero() {
            return Err(Error::InvalidBox(format!(
                "length and width must be positive, got {} x {}",
                self.length, self.width
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> T {
        self.length * self.width
    }

    pub fn diagonal(&self) -> T {
        self.length.hypot(self.width)
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[T; 2]; 4] {
        let half = T::lit(0.5);
        let (s, c) = self.yaw.sin_cos();
        let hl = self.length * half;
        let hw = self.width * half;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        // local order (+,+), (-,+), (-,-), (+,-) is counter-clockwise
        local.map(|[x, y]| [self.cx + c * x - s * y, self.cy + s * x + c * y])
    }

    /// Whether the point lies inside (or on the boundary of) the footprint.
    pub fn contains(&self, x: T, y: T) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let half = T::lit(0.5);
        u.abs() <= self.length * half && v.abs() <= self.width * half
    }

    pub fn cast<U: Real>(&self) -> BoxBev<U> {
        BoxBev {
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            length: U::lit(self.length.as_f64()),
            width: U::lit(self.width.as_f64()),
            yaw: U::lit(self.yaw.as_f64()),
        }
    }
}

/// Per-anchor regression output: diagonal-normalized center offsets, log size
/// ratios and an additive yaw residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegDelta<T> {
    pub dx: T,
    pub dy: T,
    pub dl: T,
    pub dw: T,
    pub dyaw: T,
}

impl<T: Real> RegDelta<T> {
    pub const LEN: usize = 5;

    pub fn zero() -> Self {
        RegDelta {
            dx: T::zero(),
            dy: T::zero(),
            dl: T::zero(),
            dw: T::zero(),
            dyaw: T::zero(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [T; 5] {
        [self.dx, self.dy, self.dl, self.dw, self.dyaw]
    }

    pub fn from_slice(v: &[T]) -> Self {
        RegDelta {
            dx: v[0],
            dy: v[1],
            dl: v[2],
            dw: v[3],
            dyaw: v[4],
        }
    }
}

/// Agent pose on the ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D<T> {
    pub x: T,
    pub y: T,
    pub heading: T,
}

impl<T: Real> Pose2D<T> {
    pub fn new(x: T, y: T, heading: T) -> Self {
        Pose2D {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Pose2D {
            x: T::zero(),
            y: T::zero(),
            heading: T::zero(),
        }
    }
}
