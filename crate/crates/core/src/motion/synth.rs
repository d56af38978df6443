use std::f64::consts::TAU;

use nalgebra::{Point3, Rotation3, Vector3};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::types::{Pose3DSequence, SkeletonDef};
use crate::error::{invalid, Result};

/// Horizontal root trajectory family. Speeds are in world units per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RootPath {
    Static,
    /// Straight segment through the origin, centered on the middle frame.
    Line { heading: f64, speed: f64 },
    Circle { radius: f64, speed: f64 },
    FigureEight { radius: f64, speed: f64 },
}

impl RootPath {
    /// One of line / circle / figure-eight with a speed drawn from `speed`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, speed: (f64, f64), radius: f64) -> Self {
        let s = rng.gen_range(speed.0..=speed.1);
        match rng.gen_range(0..3) {
            0 => RootPath::Line {
                heading: rng.gen_range(0.0..TAU),
                speed: s,
            },
            1 => RootPath::Circle { radius, speed: s },
            _ => RootPath::FigureEight { radius, speed: s },
        }
    }

    fn position(&self, time: f64, mid_time: f64, phase: f64) -> (f64, f64) {
        match *self {
            RootPath::Static => (0.0, 0.0),
            RootPath::Line { heading, speed } => {
                let d = speed * (time - mid_time);
                (d * heading.cos(), d * heading.sin())
            }
            RootPath::Circle { radius, speed } => {
                let a = phase + speed / radius * time;
                (radius * a.cos(), radius * a.sin())
            }
            RootPath::FigureEight { radius, speed } => {
                let a = phase + speed / radius * time;
                (radius * a.sin(), radius * a.sin() * a.cos())
            }
        }
    }
}

/// Parameters of one synthetic motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMotionSpec {
    pub skeleton: SkeletonDef,
    /// Unit bone direction of each joint in its parent's rest frame; the root entry is unused.
    pub rest_directions: Vec<[f64; 3]>,
    pub frames: usize,
    pub fps: f64,
    /// Peak joint angle in radians.
    pub amplitude: f64,
    /// Oscillation frequency range in Hz.
    pub frequency: (f64, f64),
    pub root_path: RootPath,
    pub root_height: f64,
}

impl Default for SyntheticMotionSpec {
    fn default() -> Self {
        let s = 0.5f64;
        let c = (1.0 - s * s).sqrt();
        Self {
            skeleton: SkeletonDef::desk_default(),
            rest_directions: vec![
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [s, -c, 0.0],
                [0.0, -1.0, 0.0],
                [-s, -c, 0.0],
                [0.0, -1.0, 0.0],
            ],
            frames: 64,
            fps: 30.0,
            amplitude: 0.5,
            frequency: (0.3, 1.5),
            root_path: RootPath::Static,
            root_height: 0.35,
        }
    }
}

impl SyntheticMotionSpec {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if self.rest_directions.len() != self.skeleton.joint_count() {
            return Err(invalid("one rest direction per joint is required"));
        }
        for (k, d) in self.rest_directions.iter().enumerate() {
            if k != self.skeleton.root_index && Vector3::from(*d).norm() <= 1e-12 {
                return Err(invalid(format!("rest direction of joint {k} is zero")));
            }
        }
        if self.frames < 2 {
            return Err(invalid("a synthetic motion needs at least 2 frames"));
        }
        if !(self.amplitude >= 0.0) {
            return Err(invalid("amplitude must be non-negative"));
        }
        if !(self.fps > 0.0) || !(self.frequency.0 >= 0.0 && self.frequency.0 <= self.frequency.1) {
            return Err(invalid("fps must be positive and the frequency range ordered"));
        }
        Ok(())
    }
}

struct Oscillator {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Oscillator {
    fn draw<R: Rng + ?Sized>(rng: &mut R, amplitude: f64, freq: (f64, f64)) -> Self {
        Self {
            amplitude,
            omega: TAU * rng.gen_range(freq.0..=freq.1),
            phase: rng.gen_range(0.0..TAU),
        }
    }

    fn at(&self, time: f64) -> f64 {
        self.amplitude * (self.omega * time + self.phase).sin()
    }
}

/// Forward kinematics with sinusoidal joint angles and a parametric root path.
/// Bone lengths are constant by construction.
pub fn generate_synthetic_motion<R: Rng + ?Sized>(
    spec: &SyntheticMotionSpec,
    rng: &mut R,
) -> Result<Pose3DSequence> {
    spec.validate()?;
    let sk = &spec.skeleton;
    let j_len = sk.joint_count();
    let order = sk.topological_order();

    let base_yaw = rng.gen_range(0.0..TAU);
    let path_phase = rng.gen_range(0.0..TAU);
    let yaw = Oscillator::draw(rng, 0.3 * spec.amplitude, spec.frequency);
    let joint_osc: Vec<[Oscillator; 2]> = (0..j_len)
        .map(|_| {
            [
                Oscillator::draw(rng, spec.amplitude, spec.frequency),
                Oscillator::draw(rng, spec.amplitude, spec.frequency),
            ]
        })
        .collect();

    let mid_time = (spec.frames - 1) as f64 / spec.fps / 2.0;
    let mut data = Array3::zeros((spec.frames, j_len, 3));
    let mut global_rot = vec![Rotation3::identity(); j_len];
    let mut pos = vec![Point3::origin(); j_len];
    for t in 0..spec.frames {
        let time = t as f64 / spec.fps;
        for &k in &order {
            if k == sk.root_index {
                let (x, z) = spec.root_path.position(time, mid_time, path_phase);
                pos[k] = Point3::new(x, spec.root_height, z);
                global_rot[k] = Rotation3::from_axis_angle(&Vector3::y_axis(), base_yaw + yaw.at(time));
                continue;
            }
            let p = sk.parent[k];
            let local = Rotation3::from_axis_angle(&Vector3::x_axis(), joint_osc[k][0].at(time))
                * Rotation3::from_axis_angle(&Vector3::z_axis(), joint_osc[k][1].at(time));
            global_rot[k] = global_rot[p] * local;
            let dir = Vector3::from(spec.rest_directions[k]).normalize();
            pos[k] = pos[p] + global_rot[k] * dir * sk.bone_lengths[k];
        }
        for (k, q) in pos.iter().enumerate() {
            data[[t, k, 0]] = q.x;
            data[[t, k, 1]] = q.y;
            data[[t, k, 2]] = q.z;
        }
    }
    Pose3DSequence::new(data, sk.root_index)
}
