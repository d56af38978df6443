use nalgebra::{Point2, Point3};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

fn check_finite(data: &Array3<f64>, what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite values")))
    }
}

/// `T x J` grid of 2D joint positions in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2DSequence {
    frames: Array3<f64>,
}

impl Pose2DSequence {
    pub fn new(frames: Array3<f64>) -> Result<Self> {
        if frames.shape()[2] != 2 {
            return Err(invalid(format!(
                "2D sequence needs a trailing axis of 2, got {:?}",
                frames.shape()
            )));
        }
        check_finite(&frames, "2D sequence")?;
        Ok(Self { frames })
    }

    pub fn zeros(frame_count: usize, joint_count: usize) -> Self {
        Self {
            frames: Array3::zeros((frame_count, joint_count, 2)),
        }
    }

    /// Builds a sequence from per-frame point lists; every frame must hold the same joint count.
    pub fn from_points(frames: &[Vec<Point2<f64>>]) -> Result<Self> {
        let j = frames.first().map_or(0, Vec::len);
        let mut data = Array3::zeros((frames.len(), j, 2));
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != j {
                return Err(invalid(format!(
                    "frame {t} has {} joints, expected {j}",
                    frame.len()
                )));
            }
            for (k, p) in frame.iter().enumerate() {
                data[[t, k, 0]] = p.x;
                data[[t, k, 1]] = p.y;
            }
        }
        Self::new(data)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn point(&self, t: usize, j: usize) -> Point2<f64> {
        Point2::new(self.frames[[t, j, 0]], self.frames[[t, j, 1]])
    }

    pub fn set_point(&mut self, t: usize, j: usize, p: Point2<f64>) {
        self.frames[[t, j, 0]] = p.x;
        self.frames[[t, j, 1]] = p.y;
    }

    pub fn points(&self) -> impl Iterator<Item = Point2<f64>> + '_ {
        self.frames
            .lanes(Axis(2))
            .into_iter()
            .map(|l| Point2::new(l[0], l[1]))
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.frames
    }

    pub fn into_array(self) -> Array3<f64> {
        self.frames
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames.shape() == other.frames.shape()
    }
}

/// Per-joint line coefficients `(a, b, c)` with `a x + b y + c = 0` and `a^2 + b^2 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSet {
    coeffs: Array3<f64>,
}

impl LineSet {
    /// Wraps coefficients, renormalizing every line so `a^2 + b^2 = 1`.
    pub fn new(mut coeffs: Array3<f64>) -> Result<Self> {
        if coeffs.shape()[2] != 3 {
            return Err(invalid(format!(
                "line set needs a trailing axis of 3, got {:?}",
                coeffs.shape()
            )));
        }
        check_finite(&coeffs, "line set")?;
        for mut lane in coeffs.lanes_mut(Axis(2)) {
            let norm = lane[0].hypot(lane[1]);
            if norm <= f64::MIN_POSITIVE {
                return Err(Error::DegenerateGeometry(
                    "line with a = b = 0".to_string(),
                ));
            }
            lane.mapv_inplace(|v| v / norm);
        }
        Ok(Self { coeffs })
    }

    pub(crate) fn from_normalized(coeffs: Array3<f64>) -> Self {
        Self { coeffs }
    }

    pub fn frame_count(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.coeffs.shape()[1]
    }

    pub fn line(&self, t: usize, j: usize) -> crate::geometry::Line2D {
        crate::geometry::Line2D::from_normalized(
            self.coeffs[[t, j, 0]],
            self.coeffs[[t, j, 1]],
            self.coeffs[[t, j, 2]],
        )
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.coeffs
    }

    pub fn matches(&self, seq: &Pose2DSequence) -> bool {
        self.frame_count() == seq.frame_count() && self.joint_count() == seq.joint_count()
    }
}

/// `T x J` grid of world-space joint positions; the root joint carries the global trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3DSequence {
    frames: Array3<f64>,
    root_index: usize,
}

impl Pose3DSequence {
    pub fn new(frames: Array3<f64>, root_index: usize) -> Result<Self> {
        if frames.shape()[2] != 3 {
            return Err(invalid(format!(
                "3D sequence needs a trailing axis of 3, got {:?}",
                frames.shape()
            )));
        }
        if root_index >= frames.shape()[1] {
            return Err(invalid(format!(
                "root index {root_index} out of range for {} joints",
                frames.shape()[1]
            )));
        }
        check_finite(&frames, "3D sequence")?;
        Ok(Self { frames, root_index })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn point(&self, t: usize, j: usize) -> Point3<f64> {
        Point3::new(
            self.frames[[t, j, 0]],
            self.frames[[t, j, 1]],
            self.frames[[t, j, 2]],
        )
    }

    pub fn set_point(&mut self, t: usize, j: usize, p: Point3<f64>) {
        self.frames[[t, j, 0]] = p.x;
        self.frames[[t, j, 1]] = p.y;
        self.frames[[t, j, 2]] = p.z;
    }

    pub fn root(&self, t: usize) -> Point3<f64> {
        self.point(t, self.root_index)
    }

    pub fn frame_points(&self, t: usize) -> Vec<Point3<f64>> {
        (0..self.joint_count()).map(|j| self.point(t, j)).collect()
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames.shape() == other.frames.shape()
    }
}

/// Joint hierarchy with constant bone lengths. `parent[root] == root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDef {
    pub parent: Vec<usize>,
    /// Length of the bone ending at each joint; the root entry is ignored.
    pub bone_lengths: Vec<f64>,
    pub root_index: usize,
}

impl SkeletonDef {
    pub fn new(parent: Vec<usize>, bone_lengths: Vec<f64>, root_index: usize) -> Result<Self> {
        let s = Self {
            parent,
            bone_lengths,
            root_index,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parent.len();
        if j == 0 || self.bone_lengths.len() != j {
            return Err(invalid("skeleton parent and bone length lists must match"));
        }
        if self.root_index >= j || self.parent[self.root_index] != self.root_index {
            return Err(invalid("skeleton root must be its own parent"));
        }
        for (k, &p) in self.parent.iter().enumerate() {
            if p >= j {
                return Err(invalid(format!("joint {k} has out-of-range parent {p}")));
            }
            if k != self.root_index && p == k {
                return Err(invalid(format!("joint {k} is a second root")));
            }
            if k != self.root_index && !(self.bone_lengths[k] > 0.0) {
                return Err(invalid(format!("bone ending at joint {k} must be positive")));
            }
        }
        // every joint must reach the root without revisiting a joint
        for start in 0..j {
            let mut k = start;
            for _ in 0..=j {
                if k == self.root_index {
                    break;
                }
                k = self.parent[k];
            }
            if k != self.root_index {
                return Err(invalid(format!("joint {start} is not connected to the root")));
            }
        }
        Ok(())
    }

    /// Joint indices ordered so every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let j = self.joint_count();
        let mut depth = vec![0usize; j];
        for (k, d) in depth.iter_mut().enumerate() {
            let mut cur = k;
            while cur != self.root_index {
                cur = self.parent[cur];
                *d += 1;
            }
        }
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by_key(|&k| (depth[k], k));
        order
    }

    /// Non-root joints, each paired with its parent.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.joint_count())
            .filter(move |&k| k != self.root_index)
            .map(move |k| (self.parent[k], k))
    }

    /// Eight-joint upper body: root, spine, neck, head and two two-segment arms hanging from the neck.
    pub fn desk_default() -> Self {
        Self {
            parent: vec![0, 0, 1, 2, 2, 4, 2, 6],
            bone_lengths: vec![0.0, 0.30, 0.30, 0.20, 0.30, 0.28, 0.30, 0.28],
            root_index: 0,
        }
    }
}
