use nalgebra::{Matrix3, Point2, Vector3};
use ndarray::Array3;
use rand::Rng;

use super::{CameraIntrinsics, CameraPose, Line2D};
use crate::error::{degenerate, invalid, Result};
use crate::motion::{LineSet, Pose2DSequence};

/// Minimum distance between a sampled virtual epipole and any joint it serves.
pub const EPIPOLE_GUARD_RADIUS: f64 = 0.05;

const MAX_EPIPOLE_ATTEMPTS: usize = 1000;

/// Cross-product matrix: `skew(t) * x == t.cross(x)`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Essential matrix of the relative pose from `pose_v` to `pose_w`, so that
/// calibrated correspondences satisfy `x_w^T E x_v = 0`.
pub fn essential_matrix(pose_v: &CameraPose, pose_w: &CameraPose) -> Matrix3<f64> {
    let r_rel = pose_w.rotation() * pose_v.rotation().transpose();
    let t_rel = pose_w.translation() - r_rel * pose_v.translation();
    skew(&t_rel) * r_rel
}

/// `K^{-T} E K^{-1}`.
pub fn fundamental_matrix(k: &CameraIntrinsics, e: &Matrix3<f64>) -> Matrix3<f64> {
    let k_inv = k.inverse_matrix();
    k_inv.transpose() * e * k_inv
}

/// Epipolar line `F * (p, 1)` in the other view, normalized.
pub fn epipolar_line(f: &Matrix3<f64>, p: &Point2<f64>) -> Result<Line2D> {
    let ph = Vector3::new(p.x, p.y, 1.0);
    let l = f * ph;
    let scale = f.norm() * ph.norm();
    if !(l.x.hypot(l.y) > 1e-12 * scale) {
        return Err(degenerate(format!(
            "point ({}, {}) maps to a null epipolar line (it is the epipole)",
            p.x, p.y
        )));
    }
    Line2D::from_homogeneous(l)
}

/// Axis-aligned sampling rectangle in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Point2<f64>,
    pub max: Point2<f64>,
}

impl Bounds {
    pub fn new(min: Point2<f64>, max: Point2<f64>) -> Result<Self> {
        if !(min.x <= max.x && min.y <= max.y) {
            return Err(invalid("bounds must satisfy min <= max"));
        }
        Ok(Self { min, max })
    }

    pub fn square(half_width: f64) -> Self {
        Self {
            min: Point2::new(-half_width, -half_width),
            max: Point2::new(half_width, half_width),
        }
    }
}

/// Uniform point in `bounds` at least [`EPIPOLE_GUARD_RADIUS`] away from every joint of `seq`.
pub fn sample_virtual_epipole<R: Rng + ?Sized>(
    rng: &mut R,
    bounds: &Bounds,
    seq: &Pose2DSequence,
) -> Result<Point2<f64>> {
    let w = bounds.max.x - bounds.min.x;
    let h = bounds.max.y - bounds.min.y;
    let guard2 = EPIPOLE_GUARD_RADIUS * EPIPOLE_GUARD_RADIUS;
    for _ in 0..MAX_EPIPOLE_ATTEMPTS {
        let e = Point2::new(
            bounds.min.x + rng.gen::<f64>() * w,
            bounds.min.y + rng.gen::<f64>() * h,
        );
        if seq.points().all(|p| (p - e).norm_squared() >= guard2) {
            return Ok(e);
        }
    }
    Err(degenerate(format!(
        "no admissible virtual epipole after {MAX_EPIPOLE_ATTEMPTS} attempts"
    )))
}

/// For every joint, the normalized line through the joint and the epipole `e`.
pub fn lines_to_epipole(seq: &Pose2DSequence, e: &Point2<f64>) -> Result<LineSet> {
    let (t_len, j_len) = (seq.frame_count(), seq.joint_count());
    let mut coeffs = Array3::zeros((t_len, j_len, 3));
    for t in 0..t_len {
        for j in 0..j_len {
            let line = Line2D::through(&seq.point(t, j), e).map_err(|_| {
                degenerate(format!("joint {j} of frame {t} coincides with the epipole"))
            })?;
            coeffs[[t, j, 0]] = line.a;
            coeffs[[t, j, 1]] = line.b;
            coeffs[[t, j, 2]] = line.c;
        }
    }
    Ok(LineSet::from_normalized(coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_circular_rig, CameraRig, CircularLayout};
    use nalgebra::{Point3, Rotation3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let r = Rotation3::from_euler_angles(
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
        );
        let t = Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        CameraPose::new(*r.matrix(), t).unwrap()
    }

    #[test]
    fn identical_poses_give_zero_essential() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        assert!(essential_matrix(&p, &p).abs().max() < 1e-15);
    }

    #[test]
    fn pure_translation_gives_cross_matrix() {
        let v = CameraPose::new(Matrix3::identity(), Vector3::zeros()).unwrap();
        let w = CameraPose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let e = essential_matrix(&v, &w);
        assert_eq!(e, skew(&Vector3::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn calibrated_correspondences_satisfy_essential_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let pv = random_pose(&mut rng);
            let pw = random_pose(&mut rng);
            let e = essential_matrix(&pv, &pw);
            assert!(e.determinant().abs() < 1e-12);
            for _ in 0..100 {
                let p = Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(3.0..6.0),
                );
                let xv = pv.to_camera(&p);
                let xw = pw.to_camera(&p);
                let xv = xv / xv.z;
                let xw = xw / xw.z;
                assert!((xw.transpose() * e * xv)[0].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fundamental_with_identity_intrinsics_is_essential() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let e = Matrix3::new(0.1, -0.4, 0.2, 0.3, 0.0, -0.7, 0.5, 0.6, 0.05);
        assert!((fundamental_matrix(&k, &e) - e).abs().max() < 1e-15);
        assert_eq!(fundamental_matrix(&k, &Matrix3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn fundamental_is_rank_two() {
        let rig = CameraRig::circular(CircularLayout::six_view(), CameraIntrinsics::default()).unwrap();
        for v in 0..6 {
            for w in 0..6 {
                if v == w {
                    continue;
                }
                let s = rig.fundamental(v, w).unwrap().singular_values();
                let (mx, mn) = (s.max(), s.min());
                assert!(mn < 1e-9 * mx, "pair ({v},{w}) singular values {s:?}");
            }
        }
    }

    #[test]
    fn epipolar_lines_pass_through_correspondences_and_epipole() {
        let k = CameraIntrinsics::new(1.3, 1.1, 0.02, -0.01).unwrap();
        let rig = build_circular_rig(6, 60.0, 3.0, 0.3, k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = Point3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
            let (v, w) = (0, rng.gen_range(1..6));
            let xv = rig.project(&p, v).unwrap();
            let xw = rig.project(&p, w).unwrap();
            let line = epipolar_line(rig.fundamental(v, w).unwrap(), &xv).unwrap();
            assert!((line.a * line.a + line.b * line.b - 1.0).abs() < 1e-12);
            assert!(line.distance(&xw) < 1e-9);
            let e = rig.epipole(v, w).unwrap();
            assert!(line.distance(&e) < 1e-9);
        }
    }

    #[test]
    fn epipole_maps_to_degenerate_line() {
        let rig = CameraRig::circular(CircularLayout::six_view(), CameraIntrinsics::default()).unwrap();
        let e = rig.epipole(1, 0).unwrap();
        assert!(matches!(
            epipolar_line(rig.fundamental(0, 1).unwrap(), &e),
            Err(crate::Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn lines_through_epipole_hand_cases() {
        let seq = Pose2DSequence::from_points(&[vec![Point2::new(0.0, 0.0)]]).unwrap();
        let l = lines_to_epipole(&seq, &Point2::new(1.0, 0.0)).unwrap().line(0, 0);
        assert!(l.a.abs() < 1e-15 && (l.b.abs() - 1.0).abs() < 1e-15 && l.c.abs() < 1e-15);

        let seq = Pose2DSequence::from_points(&[vec![Point2::new(0.3, 0.4)]]).unwrap();
        let l = lines_to_epipole(&seq, &Point2::new(0.3, -0.2)).unwrap().line(0, 0);
        assert!((l.a.abs() - 1.0).abs() < 1e-15 && l.b.abs() < 1e-15);
        assert!((l.c / l.a + 0.3).abs() < 1e-15);

        assert!(lines_to_epipole(&seq, &Point2::new(0.3, 0.4)).is_err());
    }

    #[test]
    fn virtual_epipole_deterministic_and_guarded() {
        let seq = Pose2DSequence::from_points(&[vec![Point2::new(0.0, 0.0), Point2::new(0.2, 0.1)]])
            .unwrap();
        let b = Bounds::square(0.3);
        let a = sample_virtual_epipole(&mut ChaCha8Rng::seed_from_u64(5), &b, &seq).unwrap();
        let c = sample_virtual_epipole(&mut ChaCha8Rng::seed_from_u64(5), &b, &seq).unwrap();
        assert_eq!(a, c);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let e = sample_virtual_epipole(&mut rng, &b, &seq).unwrap();
            assert!(seq.points().all(|p| (p - e).norm() >= EPIPOLE_GUARD_RADIUS));
        }
    }

    #[test]
    fn virtual_epipole_single_point_bounds() {
        let seq = Pose2DSequence::from_points(&[vec![Point2::new(0.0, 0.0)]]).unwrap();
        let pt = Point2::new(0.5, -0.25);
        let b = Bounds::new(pt, pt).unwrap();
        let e = sample_virtual_epipole(&mut ChaCha8Rng::seed_from_u64(0), &b, &seq).unwrap();
        assert_eq!(e, pt);
        let blocked = Bounds::new(Point2::new(0.01, 0.0), Point2::new(0.01, 0.0)).unwrap();
        assert!(sample_virtual_epipole(&mut ChaCha8Rng::seed_from_u64(0), &blocked, &seq).is_err());
    }
}
