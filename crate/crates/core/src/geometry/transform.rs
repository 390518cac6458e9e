use crate::geometry::{BoxBev, Pose2D};
use crate::scalar::{normalize_angle, Real};

/// Maps a point expressed in `from`'s frame into `to`'s frame.
#[inline]
pub fn transform_point<T: Real>(p: [T; 2], from: &Pose2D<T>, to: &Pose2D<T>) -> [T; 2] {
    let (s1, c1) = from.heading.sin_cos();
    let wx = c1 * p[0] - s1 * p[1] + from.x;
    let wy = s1 * p[0] + c1 * p[1] + from.y;
    let (s2, c2) = to.heading.sin_cos();
    let dx = wx - to.x;
    let dy = wy - to.y;
    [c2 * dx + s2 * dy, -s2 * dx + c2 * dy]
}

/// Geometry that can be moved between agent frames.
pub trait Rigid<T: Real>: Sized {
    fn transformed(&self, from: &Pose2D<T>, to: &Pose2D<T>) -> Self;
}

impl<T: Real> Rigid<T> for [T; 2] {
    fn transformed(&self, from: &Pose2D<T>, to: &Pose2D<T>) -> Self {
        transform_point(*self, from, to)
    }
}

impl<T: Real> Rigid<T> for BoxBev<T> {
    fn transformed(&self, from: &Pose2D<T>, to: &Pose2D<T>) -> Self {
        let [cx, cy] = transform_point([self.cx, self.cy], from, to);
        BoxBev {
            cx,
            cy,
            length: self.length,
            width: self.width,
            yaw: normalize_angle(self.yaw + from.heading - to.heading),
        }
    }
}

impl<T: Real, G: Rigid<T>> Rigid<T> for Vec<G> {
    fn transformed(&self, from: &Pose2D<T>, to: &Pose2D<T>) -> Self {
        self.iter().map(|g| g.transformed(from, to)).collect()
    }
}

/// Re-expresses geometry given in `from`'s frame in `to`'s frame.
pub fn se2_transform<T: Real, G: Rigid<T>>(geometry: &G, from: &Pose2D<T>, to: &Pose2D<T>) -> G {
    geometry.transformed(from, to)
}
