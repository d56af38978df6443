//! Pose-error metrics: root-relative and Procrustes-aligned joint error, root
//! translation error, and 2D reprojection error against an observed view.

use nalgebra::{Point2, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{procrustes_align, CameraRig};
use crate::motion::{project_sequence, Pose2DSequence, Pose3DSequence};

fn check(pred: &Pose3DSequence, gt: &Pose3DSequence) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(invalid(format!(
            "shapes differ: {:?} vs {:?}",
            pred.array().shape(),
            gt.array().shape()
        )));
    }
    if pred.root_index() != gt.root_index() {
        return Err(invalid("root indices differ"));
    }
    if pred.frame_count() == 0 {
        return Err(invalid("sequences are empty"));
    }
    Ok(())
}

fn root_relative(seq: &Pose3DSequence, t: usize) -> Vec<Point3<f64>> {
    let r = seq.root(t).coords;
    seq.frame_points(t).into_iter().map(|p| p - r).collect()
}

/// Mean joint distance after moving each frame's root to the origin.
pub fn mpjpe(pred: &Pose3DSequence, gt: &Pose3DSequence) -> Result<f64> {
    check(pred, gt)?;
    let mut sum = 0.0;
    for t in 0..gt.frame_count() {
        let (a, b) = (root_relative(pred, t), root_relative(gt, t));
        sum += a.iter().zip(&b).map(|(p, q)| (p - q).norm()).sum::<f64>();
    }
    Ok(sum / (gt.frame_count() * gt.joint_count()) as f64)
}

/// Mean joint distance after aligning each predicted frame to ground truth by a similarity.
pub fn pa_mpjpe(pred: &Pose3DSequence, gt: &Pose3DSequence) -> Result<f64> {
    check(pred, gt)?;
    let mut sum = 0.0;
    for t in 0..gt.frame_count() {
        let (a, b) = (pred.frame_points(t), gt.frame_points(t));
        let s = procrustes_align(&a, &b)?;
        sum += a.iter().zip(&b).map(|(p, q)| (s.apply(p) - q).norm()).sum::<f64>();
    }
    Ok(sum / (gt.frame_count() * gt.joint_count()) as f64)
}

/// Mean world-frame distance between root joints.
pub fn t_root(pred: &Pose3DSequence, gt: &Pose3DSequence) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = (0..gt.frame_count()).map(|t| (pred.root(t) - gt.root(t)).norm()).sum();
    Ok(sum / gt.frame_count() as f64)
}

fn projected(pred3d: &Pose3DSequence, gt2d: &Pose2DSequence, rig: &CameraRig, view: usize) -> Result<Pose2DSequence> {
    if pred3d.frame_count() != gt2d.frame_count() || pred3d.joint_count() != gt2d.joint_count() {
        return Err(invalid("3D prediction and 2D observation differ in shape"));
    }
    if gt2d.frame_count() == 0 {
        return Err(invalid("sequences are empty"));
    }
    project_sequence(pred3d, rig, view)
}

fn mean_2d(a: &Pose2DSequence, b: &Pose2DSequence, root: Option<usize>) -> f64 {
    let mut sum = 0.0;
    for t in 0..a.frame_count() {
        let (ra, rb) = match root {
            Some(r) => (a.point(t, r).coords, b.point(t, r).coords),
            None => Default::default(),
        };
        for j in 0..a.joint_count() {
            let pa: Point2<f64> = a.point(t, j) - ra;
            let pb: Point2<f64> = b.point(t, j) - rb;
            sum += (pa - pb).norm();
        }
    }
    sum / (a.frame_count() * a.joint_count()) as f64
}

/// Mean 2D distance between the projection of `pred3d` into `view` and `gt2d`.
pub fn j2d(pred3d: &Pose3DSequence, gt2d: &Pose2DSequence, rig: &CameraRig, view: usize) -> Result<f64> {
    let p = projected(pred3d, gt2d, rig, view)?;
    Ok(mean_2d(&p, gt2d, None))
}

/// [`j2d`] after translating both sequences so their 2D root sits at the image center.
pub fn j2d_centered(pred3d: &Pose3DSequence, gt2d: &Pose2DSequence, rig: &CameraRig, view: usize) -> Result<f64> {
    let p = projected(pred3d, gt2d, rig, view)?;
    Ok(mean_2d(&p, gt2d, Some(pred3d.root_index())))
}

/// Metrics of one sequence, scaled by 1000.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub t_root: Option<f64>,
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub j2d: f64,
    pub j2d_centered: f64,
}

impl SequenceMetrics {
    /// Full suite when 3D ground truth exists, 2D metrics otherwise.
    pub fn evaluate(
        id: impl Into<String>,
        pred: &Pose3DSequence,
        gt: Option<&Pose3DSequence>,
        observed: &Pose2DSequence,
        rig: &CameraRig,
        view: usize,
    ) -> Result<Self> {
        let k = 1000.0;
        let (t, m, pa) = match gt {
            Some(g) => (
                Some(k * t_root(pred, g)?),
                Some(k * mpjpe(pred, g)?),
                Some(k * pa_mpjpe(pred, g)?),
            ),
            None => (None, None, None),
        };
        Ok(Self {
            id: id.into(),
            t_root: t,
            mpjpe: m,
            pa_mpjpe: pa,
            j2d: k * j2d(pred, observed, rig, view)?,
            j2d_centered: k * j2d_centered(pred, observed, rig, view)?,
        })
    }
}

/// Per-sequence metrics and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean: SequenceMetrics,
    pub per_sequence: Vec<SequenceMetrics>,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = vals.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn new(per_sequence: Vec<SequenceMetrics>) -> Result<Self> {
        if per_sequence.is_empty() {
            return Err(invalid("no sequences to report"));
        }
        let n = per_sequence.len() as f64;
        let mean = SequenceMetrics {
            id: "mean".into(),
            t_root: mean_opt(per_sequence.iter().map(|s| s.t_root)),
            mpjpe: mean_opt(per_sequence.iter().map(|s| s.mpjpe)),
            pa_mpjpe: mean_opt(per_sequence.iter().map(|s| s.pa_mpjpe)),
            j2d: per_sequence.iter().map(|s| s.j2d).sum::<f64>() / n,
            j2d_centered: per_sequence.iter().map(|s| s.j2d_centered).sum::<f64>() / n,
        };
        Ok(Self { mean, per_sequence })
    }

    fn row(s: &SequenceMetrics) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
            s.id,
            f(s.t_root),
            f(s.mpjpe),
            f(s.pa_mpjpe),
            s.j2d,
            s.j2d_centered
        )
    }

    const HEADER: &'static str = "id\tt_root\tmpjpe\tpa_mpjpe\tj2d\tj2d_centered\n";

    /// Tab-separated means.
    pub fn summary_text(&self) -> String {
        format!("{}{}", Self::HEADER, Self::row(&self.mean))
    }

    /// Tab-separated per-sequence rows.
    pub fn detail_text(&self) -> String {
        let mut out = Self::HEADER.to_string();
        for s in &self.per_sequence {
            out.push_str(&Self::row(s));
        }
        out
    }
}
