//! Angle arithmetic and rigid 2-D transforms.
//!
//! Coordinates are continuous pixel coordinates: pixel `(i, j)` covers
//! `[i, i+1) x [j, j+1)` and its center sits at `(i + 0.5, j + 0.5)`. The
//! y axis points down, and every angle is measured with `atan2(dy, dx)` in
//! that frame, so a rotation by `+theta` adds `theta` to every direction.

use std::f64::consts::{PI, TAU};

/// Canonical direction angle in `[0, 2π)`.
#[inline]
pub fn normalize_2pi(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Canonical orientation angle in `[0, π)`.
#[inline]
pub fn normalize_pi(a: f64) -> f64 {
    let r = a.rem_euclid(PI);
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Signed difference `a - b` wrapped into `(-π, π]`.
#[inline]
pub fn angle_diff_2pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

/// Unsigned difference between two orientations (angles mod π), in `[0, π/2]`.
#[inline]
pub fn angle_diff_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    /// Rotates the point about `center` by `theta` radians.
    pub fn rotate_about(self, center: Point, theta: f64) -> Point {
        let (s, c) = theta.sin_cos();
        let (u, v) = (self.x - center.x, self.y - center.y);
        Point::new(center.x + c * u - s * v, center.y + s * u + c * v)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

/// Rigid motion: rotation by `theta` about an external center, then a
/// translation by `(dx, dy)`.
///
/// A registration pose maps input coordinates into reference coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidPose {
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl RigidPose {
    pub const IDENTITY: RigidPose = RigidPose {
        theta: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub const fn new(theta: f64, dx: f64, dy: f64) -> Self {
        Self { theta, dx, dy }
    }

    pub fn rotation(theta: f64) -> Self {
        Self::new(theta, 0.0, 0.0)
    }

    pub fn from_degrees(theta_deg: f64, dx: f64, dy: f64) -> Self {
        Self::new(theta_deg.to_radians(), dx, dy)
    }

    pub fn theta_degrees(&self) -> f64 {
        angle_diff_2pi(self.theta, 0.0).to_degrees()
    }

    pub fn apply(&self, p: Point, center: Point) -> Point {
        let r = p.rotate_about(center, self.theta);
        Point::new(r.x + self.dx, r.y + self.dy)
    }

    /// Maps a direction angle through the rotation part of the pose.
    pub fn apply_direction(&self, a: f64) -> f64 {
        normalize_2pi(a + self.theta)
    }

    pub fn inverse(&self) -> RigidPose {
        // g(p) = c + R(p - c) + t  =>  g^-1(p) = c + R^-1(p - c) - R^-1 t
        let (s, c) = (-self.theta).sin_cos();
        RigidPose::new(
            -self.theta,
            -(c * self.dx - s * self.dy),
            -(s * self.dx + c * self.dy),
        )
    }

    /// The pose equivalent to applying `self` first and then `next`,
    /// both about the same center.
    pub fn then(&self, next: &RigidPose) -> RigidPose {
        let (s, c) = next.theta.sin_cos();
        RigidPose::new(
            self.theta + next.theta,
            c * self.dx - s * self.dy + next.dx,
            s * self.dx + c * self.dy + next.dy,
        )
    }

    pub fn translation_norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Applies `pose` to `p`, rotating about `center` (the image center).
#[inline]
pub fn apply_pose(p: Point, pose: &RigidPose, center: Point) -> Point {
    pose.apply(p, center)
}

/// Mirrors a point about the vertical line `x = width / 2`.
#[inline]
pub fn mirror_x(p: Point, width: f64) -> Point {
    Point::new(width - p.x, p.y)
}

/// Mirrors a direction angle about the vertical axis.
#[inline]
pub fn mirror_direction(a: f64) -> f64 {
    normalize_2pi(PI - a)
}
