//! Pose-sequence types, the synthetic 3D motion oracle, projection into rig
//! views, pixel normalization and the line-delimited dataset format.

mod io;
mod synth;
mod types;

pub use io::{
    load_dataset, load_dataset_3d, save_dataset, save_dataset_3d, Record2D, Record3D, ViewTag,
};
pub use synth::{generate_synthetic_motion, RootPath, SyntheticMotionSpec};
pub use types::{LineSet, Pose2DSequence, Pose3DSequence, SkeletonDef};

use ndarray::Array3;

use crate::error::{invalid, Error, Result};
use crate::geometry::CameraRig;

/// Projects every joint of every frame into one rig view.
pub fn project_sequence(seq: &Pose3DSequence, rig: &CameraRig, view: usize) -> Result<Pose2DSequence> {
    let (t_len, j_len) = (seq.frame_count(), seq.joint_count());
    let mut out = Array3::zeros((t_len, j_len, 2));
    for t in 0..t_len {
        for j in 0..j_len {
            let p = rig.project(&seq.point(t, j), view).map_err(|e| match e {
                Error::BehindCamera { view, depth, .. } => Error::BehindCamera {
                    view,
                    depth,
                    context: format!(" at frame {t}, joint {j}"),
                },
                other => other,
            })?;
            out[[t, j, 0]] = p.x;
            out[[t, j, 1]] = p.y;
        }
    }
    Pose2DSequence::new(out)
}

/// Pixel coordinates (`T x J x 2`) to `[-1, 1]` per axis.
pub fn normalize(raw: &Array3<f64>, width: f64, height: f64) -> Result<Pose2DSequence> {
    check_dims(width, height)?;
    let mut out = raw.clone();
    for mut lane in out.lanes_mut(ndarray::Axis(2)) {
        lane[0] = 2.0 * lane[0] / width - 1.0;
        lane[1] = 2.0 * lane[1] / height - 1.0;
    }
    Pose2DSequence::new(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(seq: &Pose2DSequence, width: f64, height: f64) -> Result<Array3<f64>> {
    check_dims(width, height)?;
    let mut out = seq.array().clone();
    for mut lane in out.lanes_mut(ndarray::Axis(2)) {
        lane[0] = (lane[0] + 1.0) * 0.5 * width;
        lane[1] = (lane[1] + 1.0) * 0.5 * height;
    }
    Ok(out)
}

fn check_dims(width: f64, height: f64) -> Result<()> {
    if width > 0.0 && height > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("image size must be positive, got {width}x{height}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{epipolar_line, CameraIntrinsics, CircularLayout};
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_hand_cases() {
        let raw = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.0, 50.0, 50.0]).unwrap();
        let n = normalize(&raw, 100.0, 100.0).unwrap();
        assert_eq!(n.point(0, 0), nalgebra::Point2::new(-1.0, -1.0));
        assert_eq!(n.point(0, 1), nalgebra::Point2::new(0.0, 0.0));
        assert!(normalize(&raw, 0.0, 10.0).is_err());
        assert!(denormalize(&n, 10.0, -1.0).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(10.0..4000.0), rng.gen_range(10.0..4000.0));
            let raw = Array3::from_shape_fn((8, 5, 2), |(_, _, k)| {
                rng.gen_range(0.0..if k == 0 { w } else { h })
            });
            let back = denormalize(&normalize(&raw, w, h).unwrap(), w, h).unwrap();
            let err = (&back - &raw).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12 * w.max(h));
        }
    }

    #[test]
    fn single_point_on_axis_projects_to_principal_point() {
        let rig = CameraRig::circular(CircularLayout::six_view(), CameraIntrinsics::default()).unwrap();
        let seq = Pose3DSequence::new(Array3::zeros((1, 1, 3)), 0).unwrap();
        let p = project_sequence(&seq, &rig, 3).unwrap();
        assert!(p.point(0, 0).coords.norm() < 1e-12);
    }

    #[test]
    fn projections_are_epipolar_consistent() {
        let rig = CameraRig::circular(CircularLayout::six_view(), CameraIntrinsics::default()).unwrap();
        let spec = SyntheticMotionSpec::default();
        let seq = generate_synthetic_motion(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let views: Vec<_> = (0..6).map(|v| project_sequence(&seq, &rig, v).unwrap()).collect();
        for v in 0..6 {
            for w in 0..6 {
                if v == w {
                    continue;
                }
                let f = rig.fundamental(v, w).unwrap();
                for t in 0..seq.frame_count() {
                    for j in 0..seq.joint_count() {
                        let l = epipolar_line(f, &views[v].point(t, j)).unwrap();
                        assert!(l.distance(&views[w].point(t, j)) < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn behind_camera_reports_frame_and_joint() {
        let rig = CameraRig::circular(CircularLayout::six_view(), CameraIntrinsics::default()).unwrap();
        let mut data = Array3::zeros((3, 2, 3));
        data[[2, 1, 2]] = 5.0; // behind view 0, which sits at z = 3 looking toward -z
        let seq = Pose3DSequence::new(data, 0).unwrap();
        let err = project_sequence(&seq, &rig, 0).unwrap_err();
        assert!(err.to_string().contains("frame 2, joint 1"), "{err}");
        let _ = Point3::<f64>::origin();
    }
}
