use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{degenerate, invalid, Result};

/// `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    /// Root-mean-square distance between the transformed `a` and `b`.
    pub fn residual(&self, a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
        let sum: f64 = a
            .iter()
            .zip(b)
            .map(|(p, q)| (self.apply(p) - q).norm_squared())
            .sum();
        (sum / a.len().max(1) as f64).sqrt()
    }
}

/// Least-squares similarity transform mapping `a` onto `b` (Umeyama).
pub fn procrustes_align(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "point sets differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(degenerate("similarity alignment needs at least 3 points"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().fold(Vector3::zeros(), |s, p| s + p.coords) / n;
    let mean_b = b.iter().fold(Vector3::zeros(), |s, p| s + p.coords) / n;

    let mut cov = Matrix3::<f64>::zeros();
    let mut scatter_a = Matrix3::<f64>::zeros();
    for (p, q) in a.iter().zip(b) {
        let da = p.coords - mean_a;
        let db = q.coords - mean_b;
        cov += db * da.transpose();
        scatter_a += da * da.transpose();
    }
    cov /= n;
    scatter_a /= n;
    let var_a = scatter_a.trace();

    let mut spread = scatter_a.symmetric_eigenvalues().as_slice().to_vec();
    spread.sort_by(|x, y| y.total_cmp(x));
    if !(spread[0] > 0.0) || spread[1] <= 1e-12 * spread[0] {
        return Err(degenerate("source points are collinear"));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(degenerate("svd failed during similarity alignment")),
    };
    let d = svd.singular_values;
    let reflect = (u.determinant() * v_t.determinant()) < 0.0;
    let sign = Vector3::new(1.0, 1.0, if reflect { -1.0 } else { 1.0 });
    let rotation = u * Matrix3::from_diagonal(&sign) * v_t;
    let scale = d.component_mul(&sign).sum() / var_a;
    let translation = mean_b - scale * (rotation * mean_a);
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}
