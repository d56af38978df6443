mod common;

use mvlift_core::metrics::*;
use mvlift_core::motion::{project_sequence, Pose2DSequence, Pose3DSequence};
use nalgebra::{Rotation3, Vector3};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq<R: Rng>(rng: &mut R, t: usize, j: usize) -> Pose3DSequence {
    Pose3DSequence::new(Array3::from_shape_fn((t, j, 3), |_| rng.gen_range(-1.0..1.0)), 0).unwrap()
}

fn map_points(seq: &Pose3DSequence, mut f: impl FnMut(usize, nalgebra::Point3<f64>) -> nalgebra::Point3<f64>) -> Pose3DSequence {
    let mut out = seq.clone();
    for t in 0..seq.frame_count() {
        for j in 0..seq.joint_count() {
            out.set_point(t, j, f(t, seq.point(t, j)));
        }
    }
    out
}

#[test]
fn mpjpe_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let gt = random_seq(&mut rng, 5, 4);
    assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    let shifted = map_points(&gt, |_, p| p + Vector3::new(0.3, -1.0, 2.0));
    assert!(mpjpe(&shifted, &gt).unwrap() < 1e-12);
    let mut moved = gt.clone();
    let p = moved.point(2, 3);
    moved.set_point(2, 3, p + Vector3::new(0.0, 0.3, 0.0));
    assert!((mpjpe(&moved, &gt).unwrap() - 0.3 / 20.0).abs() < 1e-12);
    let other = random_seq(&mut rng, 4, 4);
    assert!(mpjpe(&other, &gt).is_err());
}

#[test]
fn pa_mpjpe_absorbs_similarities_and_stays_below_mpjpe() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    for _ in 0..1000 {
        let gt = random_seq(&mut rng, 2, 6);
        let pred = random_seq(&mut rng, 2, 6);
        let pa = pa_mpjpe(&pred, &gt).unwrap();
        assert!(pa <= mpjpe(&pred, &gt).unwrap() + 1e-9);
        let noisy = map_points(&gt, |_, p| p + Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)));
        assert!(pa_mpjpe(&noisy, &gt).unwrap() <= mpjpe(&noisy, &gt).unwrap() + 1e-9);
    }
    let gt = random_seq(&mut rng, 3, 6);
    let r = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
    let sim = map_points(&gt, |_, p| nalgebra::Point3::from(1.7 * (r * p.coords) + Vector3::new(4.0, -2.0, 0.5)));
    assert!(pa_mpjpe(&sim, &gt).unwrap() < 1e-9);
}

#[test]
fn pa_mpjpe_rms_never_exceeds_root_relative_rms() {
    // the alignment minimizes squared error, so the RMS form of the bound is exact
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    for _ in 0..200 {
        let gt = random_seq(&mut rng, 1, 5);
        let pred = random_seq(&mut rng, 1, 5);
        let (a, b) = (pred.frame_points(0), gt.frame_points(0));
        let s = mvlift_core::geometry::procrustes_align(&a, &b).unwrap();
        let pa_rms = s.residual(&a, &b);
        let (ra, rb) = (pred.root(0).coords, gt.root(0).coords);
        let rr_rms = (a.iter().zip(&b).map(|(p, q)| ((p - ra) - (q - rb)).norm_squared()).sum::<f64>() / 5.0).sqrt();
        assert!(pa_rms <= rr_rms + 1e-12);
    }
}

#[test]
fn t_root_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let gt = random_seq(&mut rng, 7, 3);
    let d = Vector3::new(0.3, 0.4, 1.2);
    let off = map_points(&gt, |_, p| p + d);
    assert!((t_root(&off, &gt).unwrap() - d.norm()).abs() < 1e-12);
    for _ in 0..100 {
        let pred = random_seq(&mut rng, 7, 3);
        let brute: f64 = (0..7).map(|t| {
            let (a, b) = (pred.array(), gt.array());
            ((a[[t, 0, 0]] - b[[t, 0, 0]]).powi(2) + (a[[t, 0, 1]] - b[[t, 0, 1]]).powi(2) + (a[[t, 0, 2]] - b[[t, 0, 2]]).powi(2)).sqrt()
        }).sum::<f64>() / 7.0;
        assert!((t_root(&pred, &gt).unwrap() - brute).abs() < 1e-12);
    }
}

#[test]
fn j2d_shift_and_centering() {
    let rig = common::six_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let seq = common::motion(&mut rng, 10);
    let obs = project_sequence(&seq, &rig, 0).unwrap();
    assert_eq!(j2d(&seq, &obs, &rig, 0).unwrap(), 0.0);
    assert_eq!(j2d_centered(&seq, &obs, &rig, 0).unwrap(), 0.0);
    let shift = [0.03, -0.04];
    let moved = Pose2DSequence::new(obs.array().clone() + &ndarray::Array1::from(shift.to_vec())).unwrap();
    assert!((j2d(&seq, &moved, &rig, 0).unwrap() - 0.05).abs() < 1e-12);
    assert!(j2d_centered(&seq, &moved, &rig, 0).unwrap() < 1e-12);
    // per-frame translations leave the centered metric unchanged
    let noisy = Pose2DSequence::new(Array3::from_shape_fn((10, 8, 2), |(t, j, c)| obs.array()[[t, j, c]] + 0.01 * (j as f64).sin() + 0.001 * c as f64)).unwrap();
    let mut framewise = noisy.clone();
    for t in 0..10 {
        let off = [0.1 * t as f64, -0.02 * t as f64];
        for j in 0..8 {
            for c in 0..2 {
                framewise.array_mut()[[t, j, c]] += off[c];
            }
        }
    }
    let a = j2d_centered(&seq, &noisy, &rig, 0).unwrap();
    let b = j2d_centered(&seq, &framewise, &rig, 0).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn j2d_matches_brute_force() {
    let rig = common::six_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(305);
    for _ in 0..20 {
        let seq = common::motion(&mut rng, 6);
        let obs = Pose2DSequence::new(Array3::from_shape_fn((6, 8, 2), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let mut brute = 0.0;
        let mut brute_c = 0.0;
        for t in 0..6 {
            let root = rig.project(&seq.point(t, 0), 0).unwrap();
            for j in 0..8 {
                let p = rig.project(&seq.point(t, j), 0).unwrap();
                let o = obs.point(t, j);
                brute += ((p.x - o.x).powi(2) + (p.y - o.y).powi(2)).sqrt();
                let o0 = obs.point(t, 0);
                let (dx, dy) = ((p.x - root.x) - (o.x - o0.x), (p.y - root.y) - (o.y - o0.y));
                brute_c += (dx * dx + dy * dy).sqrt();
            }
        }
        assert!((j2d(&seq, &obs, &rig, 0).unwrap() - brute / 48.0).abs() < 1e-12);
        assert!((j2d_centered(&seq, &obs, &rig, 0).unwrap() - brute_c / 48.0).abs() < 1e-12);
    }
}

#[test]
fn report_means_and_text() {
    let rig = common::six_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(306);
    let a = common::motion(&mut rng, 5);
    let b = common::motion(&mut rng, 5);
    let obs = project_sequence(&a, &rig, 0).unwrap();
    let m1 = SequenceMetrics::evaluate("a", &a, Some(&a), &obs, &rig, 0).unwrap();
    let m2 = SequenceMetrics::evaluate("b", &b, Some(&a), &obs, &rig, 0).unwrap();
    let report = MetricReport::new(vec![m1.clone(), m2.clone()]).unwrap();
    assert!((report.mean.mpjpe.unwrap() - 0.5 * m2.mpjpe.unwrap()).abs() < 1e-9);
    assert!(report.summary_text().starts_with("id\tt_root"));
    assert_eq!(report.detail_text().lines().count(), 3);
    let no_gt = SequenceMetrics::evaluate("c", &a, None, &obs, &rig, 0).unwrap();
    assert!(no_gt.mpjpe.is_none());
}
