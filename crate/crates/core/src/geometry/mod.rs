//! Pinhole cameras, circular rigs, epipolar machinery, triangulation and
//! similarity alignment.
//!
//! Image points live in normalized image coordinates (`u = fx * X / Z + cx`),
//! the frame every 2D sequence uses. Rays in the camera frame with unit depth
//! are called calibrated coordinates.

mod camera;
mod epipolar;
mod procrustes;
mod triangulate;

pub use camera::{build_circular_rig, CameraIntrinsics, CameraPose, CameraRig, CircularLayout};
pub use epipolar::{
    epipolar_line, essential_matrix, fundamental_matrix, lines_to_epipole,
    sample_virtual_epipole, skew, Bounds, EPIPOLE_GUARD_RADIUS,
};
pub use procrustes::{procrustes_align, Similarity};
pub use triangulate::{triangulate, Triangulation};

use nalgebra::{Point2, Vector3};

use crate::error::{degenerate, Result};

/// Image line `a x + b y + c = 0`, always stored with `a^2 + b^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Line2D {
    /// Normalizes homogeneous line coordinates. Fails when `a = b = 0`.
    pub fn from_homogeneous(l: Vector3<f64>) -> Result<Self> {
        let norm = l.x.hypot(l.y);
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(degenerate("line has no direction (a = b = 0)"));
        }
        Ok(Self {
            a: l.x / norm,
            b: l.y / norm,
            c: l.z / norm,
        })
    }

    pub(crate) fn from_normalized(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Line through two distinct points.
    pub fn through(p: &Point2<f64>, q: &Point2<f64>) -> Result<Self> {
        if (p - q).norm() <= 1e-12 {
            return Err(degenerate(format!(
                "points ({}, {}) and ({}, {}) coincide",
                p.x, p.y, q.x, q.y
            )));
        }
        Self::from_homogeneous(Vector3::new(p.x, p.y, 1.0).cross(&Vector3::new(q.x, q.y, 1.0)))
    }

    /// Signed algebraic residual, equal to the signed perpendicular distance.
    pub fn signed_distance(&self, p: &Point2<f64>) -> f64 {
        self.a * p.x + self.b * p.y + self.c
    }

    pub fn distance(&self, p: &Point2<f64>) -> f64 {
        self.signed_distance(p).abs()
    }

    pub fn coeffs(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}
