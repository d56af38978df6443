#![allow(dead_code)]

use mvlift_core::geometry::{CameraIntrinsics, CameraRig, CircularLayout};
use mvlift_core::motion::{
    generate_synthetic_motion, project_sequence, Pose2DSequence, Pose3DSequence, RootPath,
    SyntheticMotionSpec,
};
use rand::Rng;

pub fn six_rig() -> CameraRig {
    CameraRig::circular(CircularLayout::six_view(), CameraIntrinsics::default()).unwrap()
}

pub fn four_rig() -> CameraRig {
    CameraRig::circular(CircularLayout::four_view(), CameraIntrinsics::default()).unwrap()
}

pub fn motion<R: Rng>(rng: &mut R, frames: usize) -> Pose3DSequence {
    let spec = SyntheticMotionSpec {
        frames,
        root_path: RootPath::random(rng, (0.2, 0.6), 0.5),
        ..Default::default()
    };
    generate_synthetic_motion(&spec, rng).unwrap()
}

pub fn views(seq: &Pose3DSequence, rig: &CameraRig) -> Vec<Pose2DSequence> {
    (0..rig.view_count()).map(|v| project_sequence(seq, rig, v).unwrap()).collect()
}

pub fn max_abs(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
