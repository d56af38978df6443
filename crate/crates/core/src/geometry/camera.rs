use std::collections::BTreeMap;

use nalgebra::{Matrix2x3, Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::epipolar::{essential_matrix, fundamental_matrix};
use crate::error::{invalid, Error, Result};

/// Pinhole intrinsics in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 1.2,
            fy: 1.2,
            cx: 0.0,
            cy: 0.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Image point to calibrated (unit-depth) ray coordinates.
    pub fn unproject(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }
}

/// World-to-camera transform: `X_cam = rotation * X_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(invalid("camera rotation must be orthogonal with determinant +1"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("camera translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera at `center` looking at `target`, image y pointing away from `up`.
    pub fn look_at(center: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - center;
        if forward.norm() <= 1e-12 {
            return Err(invalid("camera center coincides with its target"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() <= 1e-12 {
            return Err(invalid("viewing direction is parallel to the up vector"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * center.coords);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }
}

/// Placement parameters of a rig whose cameras sit on a horizontal circle looking at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularLayout {
    pub n_views: usize,
    pub angle_step_deg: f64,
    pub radius: f64,
    pub height: f64,
}

impl CircularLayout {
    pub fn six_view() -> Self {
        Self {
            n_views: 6,
            angle_step_deg: 60.0,
            radius: 3.0,
            height: 0.0,
        }
    }

    pub fn four_view() -> Self {
        Self {
            n_views: 4,
            angle_step_deg: 90.0,
            radius: 3.0,
            height: 0.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RigDocument {
    n_views: usize,
    angle_step_deg: f64,
    radius: f64,
    height: f64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

/// Shared intrinsics plus per-view extrinsics, with the essential and
/// fundamental matrix of every ordered view pair.
///
/// `fundamental(v, w)` maps an image point of view `v` to its epipolar line in view `w`.
#[derive(Debug, Clone)]
pub struct CameraRig {
    intrinsics: CameraIntrinsics,
    views: Vec<CameraPose>,
    layout: Option<CircularLayout>,
    essential: BTreeMap<(usize, usize), Matrix3<f64>>,
    fundamental: BTreeMap<(usize, usize), Matrix3<f64>>,
}

impl CameraRig {
    pub fn new(intrinsics: CameraIntrinsics, views: Vec<CameraPose>) -> Result<Self> {
        intrinsics.validate()?;
        if views.is_empty() {
            return Err(invalid("a rig needs at least one view"));
        }
        let mut essential = BTreeMap::new();
        let mut fundamental = BTreeMap::new();
        for (v, pv) in views.iter().enumerate() {
            for (w, pw) in views.iter().enumerate() {
                if v == w {
                    continue;
                }
                let e = essential_matrix(pv, pw);
                fundamental.insert((v, w), fundamental_matrix(&intrinsics, &e));
                essential.insert((v, w), e);
            }
        }
        Ok(Self {
            intrinsics,
            views,
            layout: None,
            essential,
            fundamental,
        })
    }

    pub fn circular(layout: CircularLayout, intrinsics: CameraIntrinsics) -> Result<Self> {
        build_circular_rig(
            layout.n_views,
            layout.angle_step_deg,
            layout.radius,
            layout.height,
            intrinsics,
        )
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn views(&self) -> &[CameraPose] {
        &self.views
    }

    pub fn view(&self, v: usize) -> Result<&CameraPose> {
        self.views
            .get(v)
            .ok_or_else(|| invalid(format!("view {v} out of range for {} views", self.views.len())))
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn layout(&self) -> Option<&CircularLayout> {
        self.layout.as_ref()
    }

    pub fn essential(&self, v: usize, w: usize) -> Option<&Matrix3<f64>> {
        self.essential.get(&(v, w))
    }

    pub fn fundamental(&self, v: usize, w: usize) -> Option<&Matrix3<f64>> {
        self.fundamental.get(&(v, w))
    }

    /// Number of ordered pairs with populated matrices.
    pub fn pair_count(&self) -> usize {
        self.fundamental.len()
    }

    /// Perspective projection of a world point into `view`.
    pub fn project(&self, p: &Point3<f64>, view: usize) -> Result<Point2<f64>> {
        let xc = self.view(view)?.to_camera(p);
        if !(xc.z > 1e-12) {
            return Err(Error::BehindCamera {
                view,
                depth: xc.z,
                context: String::new(),
            });
        }
        let k = &self.intrinsics;
        Ok(Point2::new(
            k.fx * xc.x / xc.z + k.cx,
            k.fy * xc.y / xc.z + k.cy,
        ))
    }

    /// Projection plus its Jacobian with respect to the world point.
    pub fn project_with_jacobian(
        &self,
        p: &Point3<f64>,
        view: usize,
    ) -> Result<(Point2<f64>, Matrix2x3<f64>)> {
        let pose = self.view(view)?;
        let xc = pose.to_camera(p);
        if !(xc.z > 1e-12) {
            return Err(Error::BehindCamera {
                view,
                depth: xc.z,
                context: String::new(),
            });
        }
        let k = &self.intrinsics;
        let iz = 1.0 / xc.z;
        let d = Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * xc.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * xc.y * iz * iz,
        );
        Ok((
            Point2::new(k.fx * xc.x * iz + k.cx, k.fy * xc.y * iz + k.cy),
            d * pose.rotation(),
        ))
    }

    /// Image of camera `of`'s center in `in_view`.
    pub fn epipole(&self, of: usize, in_view: usize) -> Result<Point2<f64>> {
        let c = self.view(of)?.center();
        self.project(&c, in_view)
    }

    /// Short identifier such as `circular-6x60-r3-h0`.
    pub fn identifier(&self) -> String {
        match &self.layout {
            Some(l) => format!(
                "circular-{}x{}-r{}-h{}",
                l.n_views, l.angle_step_deg, l.radius, l.height
            ),
            None => format!("custom-{}", self.views.len()),
        }
    }

    /// Plain-text key-value document; derived matrices are recomputed on load.
    pub fn to_text(&self) -> Result<String> {
        let l = self
            .layout
            .ok_or_else(|| invalid("only circular rigs can be serialized"))?;
        let doc = RigDocument {
            n_views: l.n_views,
            angle_step_deg: l.angle_step_deg,
            radius: l.radius,
            height: l.height,
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
        };
        toml::to_string(&doc).map_err(|e| invalid(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: RigDocument = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        build_circular_rig(
            doc.n_views,
            doc.angle_step_deg,
            doc.radius,
            doc.height,
            CameraIntrinsics::new(doc.fx, doc.fy, doc.cx, doc.cy)?,
        )
    }
}

/// Cameras on a circle of `radius` around the world origin at `height`, each
/// looking at the origin. View `k` sits at azimuth `k * angle_step` measured
/// from the +z axis; world +y is up.
pub fn build_circular_rig(
    n_views: usize,
    angle_step_deg: f64,
    radius: f64,
    height: f64,
    intrinsics: CameraIntrinsics,
) -> Result<CameraRig> {
    if n_views == 0 {
        return Err(invalid("a circular rig needs at least one view"));
    }
    if !(radius > 0.0) {
        return Err(invalid(format!("rig radius must be positive, got {radius}")));
    }
    if !angle_step_deg.is_finite() || !height.is_finite() {
        return Err(invalid("rig angle step and height must be finite"));
    }
    let views = (0..n_views)
        .map(|k| {
            let theta = (k as f64 * angle_step_deg).to_radians();
            let center = Point3::new(radius * theta.sin(), height, radius * theta.cos());
            CameraPose::look_at(center, Point3::origin(), Vector3::y())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rig = CameraRig::new(intrinsics, views)?;
    rig.layout = Some(CircularLayout {
        n_views,
        angle_step_deg,
        radius,
        height,
    });
    Ok(rig)
}
