mod common;

use mvlift_core::diffusion::*;
use mvlift_core::geometry::Line2D;
use mvlift_core::motion::{LineSet, Pose2DSequence};
use nalgebra::{Point2, Rotation2, Vector3};
use ndarray::{Array3, Dim};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn q_sample_moments_match_within_three_standard_errors() {
    let s = NoiseSchedule::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let x0 = Pose2DSequence::new(Array3::from_shape_fn((2, 2, 2), |(t, j, c)| 0.3 * t as f64 - 0.2 * j as f64 + 0.1 * c as f64)).unwrap();
    let draws = 10_000;
    for n in [1, 30, 100] {
        let mut sum = Array3::<f64>::zeros((2, 2, 2));
        let mut sq = Array3::<f64>::zeros((2, 2, 2));
        for _ in 0..draws {
            let eps = standard_normal(Dim([2, 2, 2]), &mut rng);
            let x = q_sample(&x0, n, &eps, &s).unwrap();
            sum += x.array();
            sq += &x.array().mapv(|v| v * v);
        }
        let mean = &sum / draws as f64;
        let var = &sq / draws as f64 - mean.mapv(|v| v * v);
        let target_var = 1.0 - s.alpha_bar(n);
        for ((m, v), x) in mean.iter().zip(var.iter()).zip(x0.array().iter()) {
            let se_mean = (target_var / draws as f64).sqrt();
            assert!((m - s.alpha_bar(n).sqrt() * x).abs() < 3.0 * se_mean, "n={n} mean");
            // variance of a sample variance of normals is 2 sigma^4 / (N-1)
            let se_var = (2.0 * target_var * target_var / (draws - 1) as f64).sqrt();
            assert!((v - target_var).abs() < 3.0 * se_var, "n={n} var {v} vs {target_var}");
        }
    }
}

#[test]
fn line_loss_matches_perpendicular_distance_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    for _ in 0..1000 {
        let (t, j) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let pred = Pose2DSequence::new(Array3::from_shape_fn((t, j, 2), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let raw = Array3::from_shape_fn((t, j, 3), |_| rng.gen_range(-2.0..2.0));
        let lines = LineSet::new(raw.clone()).unwrap();
        let mut oracle = 0.0;
        for a in 0..t {
            for b in 0..j {
                // distance from a point to a line through two of its points
                let (la, lb, lc) = (raw[[a, b, 0]], raw[[a, b, 1]], raw[[a, b, 2]]);
                let p0 = Point2::new(-la * lc, -lb * lc) / (la * la + lb * lb);
                let dir = Vector3::new(-lb, la, 0.0).normalize();
                let p = pred.point(a, b);
                let w = Vector3::new(p.x - p0.x, p.y - p0.y, 0.0);
                oracle += w.cross(&dir).norm();
            }
        }
        let ours = line_matching_loss(&pred, &lines).unwrap();
        assert!((ours - oracle).abs() < 1e-12 * (1.0 + oracle), "{ours} vs {oracle}");
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = NoiseSchedule::desk();
    let lines = LineSet::new(Array3::from_elem((3, 2, 3), 0.5)).unwrap();
    let den = |x: &Pose2DSequence, n: usize, _: &LineSet| Pose2DSequence::new(x.array() * (0.5 + 0.001 * n as f64));
    let a = sample(&den, &lines, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample(&den, &lines, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let c = sample(&den, &lines, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn training_loss_vanishes_only_for_exact_on_line_predictions() {
    let s = NoiseSchedule::desk();
    let cfg = TrainingConfig::default();
    let x0 = Pose2DSequence::from_points(&[vec![Point2::new(0.2, 0.0), Point2::new(-0.4, 0.0)]]).unwrap();
    let lines = LineSet::new(Array3::from_shape_vec((1, 2, 3), vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
    let eps = Array3::from_elem((1, 2, 2), 0.1);
    let exact = |_: &Pose2DSequence, _: usize, _: &LineSet| Ok(x0.clone());
    assert!(training_loss(&x0, 3, &lines, &exact, &eps, &s, &cfg).unwrap().total <= 1e-12);
    // on the lines but not equal to x0
    let slid = Pose2DSequence::from_points(&[vec![Point2::new(0.3, 0.0), Point2::new(-0.4, 0.0)]]).unwrap();
    let slid_den = |_: &Pose2DSequence, _: usize, _: &LineSet| Ok(slid.clone());
    let p = training_loss(&x0, 3, &lines, &slid_den, &eps, &s, &cfg).unwrap();
    assert!(p.total > 1e-3 && p.line == 0.0);
}

proptest! {
    #[test]
    fn q_sample_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, n in 0usize..=100, seed in 0u64..1000) {
        let s = NoiseSchedule::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = standard_normal(Dim([2, 3, 2]), &mut rng);
        let x2 = standard_normal(Dim([2, 3, 2]), &mut rng);
        let e1 = standard_normal(Dim([2, 3, 2]), &mut rng);
        let e2 = standard_normal(Dim([2, 3, 2]), &mut rng);
        let lhs = q_sample_array(&(&x1 * a + &x2 * b), n, &(&e1 * a + &e2 * b), &s).unwrap();
        let rhs = q_sample_array(&x1, n, &e1, &s).unwrap() * a + q_sample_array(&x2, n, &e2, &s).unwrap() * b;
        prop_assert!(common::max_abs(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn line_loss_is_rotation_invariant(angle in 0.0f64..6.283, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = Rotation2::new(angle);
        let pts: Vec<Vec<Point2<f64>>> = (0..3).map(|_| (0..4).map(|_| Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).collect();
        let e = Point2::new(rng.gen_range(2.0..3.0), rng.gen_range(-1.0..1.0));
        let mut l1 = Array3::zeros((3, 4, 3));
        let mut l2 = Array3::zeros((3, 4, 3));
        let mut p2 = Vec::new();
        for (t, frame) in pts.iter().enumerate() {
            let mut f2 = Vec::new();
            for (j, p) in frame.iter().enumerate() {
                let anchor = Point2::new(p.x + rng.gen_range(-0.1..0.1), p.y + rng.gen_range(-0.1..0.1));
                let a = Line2D::through(&anchor, &e).unwrap();
                let b = Line2D::through(&(rot * anchor), &(rot * e)).unwrap();
                for c in 0..3 {
                    l1[[t, j, c]] = a.coeffs()[c];
                    l2[[t, j, c]] = b.coeffs()[c];
                }
                f2.push(rot * p);
            }
            p2.push(f2);
        }
        let a = line_matching_loss(&Pose2DSequence::from_points(&pts).unwrap(), &LineSet::new(l1).unwrap()).unwrap();
        let b = line_matching_loss(&Pose2DSequence::from_points(&p2).unwrap(), &LineSet::new(l2).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
