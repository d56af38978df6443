mod common;

use mvlift_core::lift3d::*;
use mvlift_core::metrics::mpjpe;
use mvlift_core::motion::{
    generate_synthetic_motion, Pose2DSequence, Pose3DSequence, RootPath, SkeletonDef, SyntheticMotionSpec,
};
use mvlift_core::Error;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_joint_error(a: &Pose3DSequence, b: &Pose3DSequence) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..a.frame_count() {
        for j in 0..a.joint_count() {
            worst = worst.max((a.point(t, j) - b.point(t, j)).norm());
        }
    }
    worst
}

#[test]
fn exact_views_are_inverted_exactly() {
    let rig = common::six_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for _ in 0..5 {
        let gt = common::motion(&mut rng, 16);
        let views = common::views(&gt, &rig);
        let (rec, report) = recover_3d(&views, &rig, None, &LiftOptions::unregularized()).unwrap();
        assert!(max_joint_error(&rec, &gt) < 1e-6);
        assert!(report.reprojection < 1e-12);
        assert!(report.converged);
    }
}

#[test]
fn single_point_reduces_to_triangulation() {
    let rig = common::six_rig();
    let p = nalgebra::Point3::new(0.2, 0.5, -0.1);
    let views: Vec<_> = (0..6)
        .map(|v| Pose2DSequence::from_points(&[vec![rig.project(&p, v).unwrap()]]).unwrap())
        .collect();
    let (rec, _) = recover_3d(&views, &rig, None, &LiftOptions::default()).unwrap();
    assert!((rec.point(0, 0) - p).norm() < 1e-9);
}

#[test]
fn regularization_beats_triangulation_on_noisy_views() {
    let rig = common::six_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let sk = SkeletonDef::desk_default();
    let (mut tri_err, mut reg_err) = (0.0, 0.0);
    for _ in 0..4 {
        let gt = common::motion(&mut rng, 32);
        let views: Vec<_> = common::views(&gt, &rig)
            .into_iter()
            .map(|v| {
                let noise = mvlift_core::diffusion::standard_normal(v.array().raw_dim(), &mut rng);
                Pose2DSequence::new(v.array() + &(noise * 1e-3)).unwrap()
            })
            .collect();
        let (tri, _) = recover_3d(&views, &rig, None, &LiftOptions::unregularized()).unwrap();
        let (reg, report) = recover_3d(&views, &rig, Some(&sk), &LiftOptions::default()).unwrap();
        tri_err += mpjpe(&tri, &gt).unwrap();
        reg_err += mpjpe(&reg, &gt).unwrap();
        assert!(report.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(reg_err < tri_err, "regularized {reg_err} vs triangulated {tri_err}");
}

#[test]
fn objective_is_non_increasing_from_a_poor_start() {
    let rig = common::six_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(502);
    let gt = common::motion(&mut rng, 8);
    let views: Vec<_> = common::views(&gt, &rig)
        .into_iter()
        .map(|v| Pose2DSequence::new(v.array().mapv(|x| x + rng.gen_range(-0.02..0.02))).unwrap())
        .collect();
    let opts = LiftOptions::unregularized();
    let (_, report) = recover_3d(&views, &rig, None, &opts).unwrap();
    assert!(report.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!((report.objective_trace.last().unwrap() - report.reprojection).abs() < 1e-12);
    assert_eq!(report.joint_residuals.shape(), &[8, 8]);
}

#[test]
fn recover_rejects_bad_inputs() {
    let rig = common::six_rig();
    let seq = Pose2DSequence::zeros(2, 3);
    assert!(matches!(recover_3d(&[seq.clone()], &rig, None, &LiftOptions::default()), Err(Error::InsufficientViews(1))));
    assert!(recover_3d(&vec![seq; 4], &rig, None, &LiftOptions::default()).is_err());
}

#[test]
fn bone_enforcement_properties() {
    let sk = SkeletonDef::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(503);
    let gt = common::motion(&mut rng, 10);
    let same = enforce_bone_lengths(&gt, &sk).unwrap();
    assert!(common::max_abs(same.array(), gt.array()) < 1e-12);

    let noisy = Pose3DSequence::new(gt.array().mapv(|v| v + rng.gen_range(-0.05..0.05)), 0).unwrap();
    let fixed = enforce_bone_lengths(&noisy, &sk).unwrap();
    for t in 0..10 {
        assert!((fixed.root(t) - noisy.root(t)).norm() < 1e-12);
        for (p, c) in sk.bones() {
            let len = (fixed.point(t, c) - fixed.point(t, p)).norm();
            assert!((len - sk.bone_lengths[c]).abs() < 1e-9);
        }
    }
    let again = enforce_bone_lengths(&fixed, &sk).unwrap();
    assert!(common::max_abs(again.array(), fixed.array()) < 1e-12);

    let mut collapsed = gt.clone();
    let root = collapsed.point(0, 0);
    collapsed.set_point(0, 1, root);
    assert!(matches!(enforce_bone_lengths(&collapsed, &sk), Err(Error::DegenerateGeometry(_))));
}

#[test]
fn dataset_entries_are_strictly_consistent() {
    let rig4 = common::four_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(504);
    let seqs: Vec<_> = (0..5).map(|_| common::motion(&mut rng, 12)).collect();
    let (ds, skipped) = build_mv_dataset(&seqs, &rig4).unwrap();
    assert_eq!(ds.entries.len(), 5);
    assert!(skipped.is_empty());
    for e in &ds.entries {
        assert!(strict_consistency_residual(&e.views, &rig4).unwrap() < 1e-9);
        assert!(mvlift_core::mv_optimize::multiview_consistency_loss(&e.views, &rig4).unwrap() < 1e-9);
    }
    let arrays = ds.training_arrays();
    assert_eq!(arrays[0].shape(), &[4, 12, 8, 2]);

    let records = ds.to_records(30.0);
    assert_eq!(records.len(), 20);
    let back = MVDataset::from_records(&records, rig4.clone()).unwrap();
    assert_eq!(back.entries, ds.entries);
    let mut tampered = records.clone();
    tampered[1].seq.array_mut()[[0, 0, 0]] += 1e-3;
    assert!(MVDataset::from_records(&tampered, rig4).is_err());
}

#[test]
fn sequences_behind_a_camera_are_skipped() {
    let rig4 = common::four_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut seqs: Vec<_> = (0..3).map(|_| common::motion(&mut rng, 8)).collect();
    let spec = SyntheticMotionSpec {
        frames: 8,
        root_path: RootPath::Line { heading: 0.0, speed: 40.0 },
        ..Default::default()
    };
    seqs.insert(1, generate_synthetic_motion(&spec, &mut rng).unwrap());
    let (ds, skipped) = build_mv_dataset(&seqs, &rig4).unwrap();
    assert_eq!(ds.entries.len(), 3);
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0].index, 1);

    let far = Pose3DSequence::new(Array3::from_elem((2, 8, 3), 0.0).mapv(|_: f64| 10.0), 0).unwrap();
    assert!(matches!(build_mv_dataset(&[far], &rig4), Err(Error::EmptyDataset(_))));
    assert!(build_mv_dataset(&seqs, &common::six_rig()).is_err());
}
