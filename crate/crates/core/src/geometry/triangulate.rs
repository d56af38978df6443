use nalgebra::{DMatrix, DVector, Matrix3, Point2, Point3, Vector3};

use super::CameraRig;
use crate::error::{degenerate, Error, Result};

const MAX_REFINE_STEPS: usize = 20;
const STEP_TOLERANCE: f64 = 1e-10;
const MAX_CONDITION: f64 = 1e12;

/// Triangulated point together with its summed squared reprojection error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Point3<f64>,
    pub residual: f64,
}

fn reprojection_cost(rig: &CameraRig, obs: &[(usize, Point2<f64>)], p: &Point3<f64>) -> f64 {
    let mut cost = 0.0;
    for (v, u) in obs {
        match rig.project(p, *v) {
            Ok(q) => cost += (q - u).norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

/// Linear triangulation in calibrated coordinates followed by Gauss-Newton
/// refinement of the geometric reprojection error.
pub fn triangulate(observations: &[(usize, Point2<f64>)], rig: &CameraRig) -> Result<Triangulation> {
    if observations.len() < 2 {
        return Err(Error::InsufficientViews(observations.len()));
    }
    let n = observations.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 3);
    let mut b = DVector::<f64>::zeros(2 * n);
    for (i, (v, u)) in observations.iter().enumerate() {
        let pose = rig.view(*v)?;
        let x = rig.intrinsics().unproject(u);
        let r = pose.rotation();
        let t = pose.translation();
        for (k, coord) in [x.x, x.y].into_iter().enumerate() {
            let row = 2 * i + k;
            for c in 0..3 {
                a[(row, c)] = coord * r[(2, c)] - r[(k, c)];
            }
            b[row] = t[k] - coord * t[2];
        }
    }
    let svd = a.svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(degenerate(format!(
            "triangulation rays are near-parallel (condition {:.3e})",
            smax / smin
        )));
    }
    let sol = svd
        .solve(&b, 0.0)
        .map_err(|e| degenerate(format!("triangulation solve failed: {e}")))?;
    let mut p = Point3::new(sol[0], sol[1], sol[2]);
    for (v, _) in observations {
        let depth = rig.view(*v)?.to_camera(&p).z;
        if !(depth > 1e-12) {
            return Err(Error::BehindCamera {
                view: *v,
                depth,
                context: " (triangulated point)".into(),
            });
        }
    }

    let mut cost = reprojection_cost(rig, observations, &p);
    for _ in 0..MAX_REFINE_STEPS {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (v, u) in observations {
            let (q, jac) = rig.project_with_jacobian(&p, *v)?;
            let r = q - u;
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * r;
        }
        let Some(step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = p + step * scale;
            let c = reprojection_cost(rig, observations, &cand);
            if c <= cost {
                p = cand;
                cost = c;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || step.norm() * scale < STEP_TOLERANCE {
            break;
        }
    }
    Ok(Triangulation { point: p, residual: cost })
}
