//! Pinhole cameras, poses, point splatting and Plücker rays.
//!
//! Poses map world to camera. The camera looks down +z, image x grows to the
//! right and y grows downwards, pixel `(0, 0)` is the top-left pixel and its
//! center sits at `(0.5, 0.5)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Points at or in front of this depth are culled.
pub const NEAR_PLANE: f64 = 1e-4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (residual {0:.3e})")]
    NotARotation(f64),
    #[error("point cloud: {0}")]
    Cloud(String),
    #[error("degenerate alignment input: {0}")]
    Degenerate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Result<Self, GeometryError> {
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Self::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::Intrinsics(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::Intrinsics("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::Intrinsics("image must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Camera-space direction (z = 1) through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Continuous image coordinates of a camera-space point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn rotation_residual(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let res = rotation_residual(&rotation);
        if !(res < 1e-6) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation(res));
        }
        Ok(CameraPose { rotation, translation })
    }

    pub fn identity() -> Self {
        CameraPose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        CameraPose { rotation: r.into_inner(), translation }
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let f = (target - eye).try_normalize(1e-12).ok_or_else(|| GeometryError::Degenerate("eye equals target".into()))?;
        let right = f.cross(&up).try_normalize(1e-12).ok_or_else(|| GeometryError::Degenerate("view direction parallel to up".into()))?;
        let down = f.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        CameraPose::new(r, -(r * eye))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `a ∘ b`: apply `b` first, then `a`.
    pub fn compose(&self, b: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate().take(3) {
            for (j, v) in row.iter_mut().enumerate().take(3) {
                *v = self.rotation[(i, j)];
            }
            row[3] = self.translation[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::NotARotation(f64::NAN));
        }
        let r = Matrix3::from_fn(|i, j| m[i][j]);
        CameraPose::new(r, Vector3::new(m[0][3], m[1][3], m[2][3]))
    }

    fn quaternion(&self) -> Vector4<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        q.into_inner().coords
    }
}

/// Geodesic angle between two rotations, `arccos((tr(A·Bᵀ) − 1)/2)` with the
/// argument clamped. Evaluated as `atan2(sin, cos)` with the sine taken from
/// the antisymmetric part, which is exact at zero where arccos is not.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a * b.transpose();
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    s.atan2(c)
}

/// Slerp on rotations (shortest arc), lerp on translations.
pub fn interpolate_pose(a: &CameraPose, b: &CameraPose, s: f64) -> CameraPose {
    if s <= 0.0 {
        return *a;
    }
    if s >= 1.0 {
        return *b;
    }
    let qa = a.quaternion();
    let mut qb = b.quaternion();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let q = if dot > 1.0 - 1e-12 {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin) + qb * ((s * theta).sin() / sin)
    };
    let rot = UnitQuaternion::new_normalize(Quaternion::from(q)).to_rotation_matrix().into_inner();
    CameraPose {
        rotation: rot,
        translation: a.translation * (1.0 - s) + b.translation * s,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidentPointCloud {
    positions: Vec<Vector3<f64>>,
    colors: Vec<[f32; 3]>,
    confidence: Vec<f32>,
}

impl ConfidentPointCloud {
    pub fn new(positions: Vec<Vector3<f64>>, colors: Vec<[f32; 3]>, confidence: Vec<f32>) -> Result<Self, GeometryError> {
        if positions.len() != colors.len() || positions.len() != confidence.len() {
            return Err(GeometryError::Cloud("positions, colors and confidence differ in length".into()));
        }
        if !positions.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::Cloud("non-finite position".into()));
        }
        if !colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)) {
            return Err(GeometryError::Cloud("color outside [0, 1]".into()));
        }
        if !confidence.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(GeometryError::Cloud("confidence outside [0, 1]".into()));
        }
        Ok(ConfidentPointCloud { positions, colors, confidence })
    }

    pub fn empty() -> Self {
        ConfidentPointCloud { positions: vec![], colors: vec![], confidence: vec![] }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }

    pub fn confidence(&self) -> &[f32] {
        &self.confidence
    }

    pub fn transformed(&self, pose: &CameraPose) -> Self {
        ConfidentPointCloud {
            positions: self.positions.iter().map(|p| pose.apply(p)).collect(),
            colors: self.colors.clone(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Per-pixel ray directions and moments, row-major over pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerImage {
    pub width: usize,
    pub height: usize,
    pub directions: Vec<Vector3<f64>>,
    pub moments: Vec<Vector3<f64>>,
}

impl PluckerImage {
    /// Six channel-major planes `[d.x, d.y, d.z, m.x, m.y, m.z]`.
    pub fn channels(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0f32; 6 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.directions[i][c] as f32;
                out[(3 + c) * n + i] = self.moments[i][c] as f32;
            }
        }
        out
    }
}

pub fn plucker_embedding(pose: &CameraPose, intr: &CameraIntrinsics) -> PluckerImage {
    let c = pose.center();
    let rt = pose.rotation.transpose();
    let n = intr.width * intr.height;
    let mut directions = Vec::with_capacity(n);
    let mut moments = Vec::with_capacity(n);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let d = (rt * intr.pixel_ray(x, y)).normalize();
            directions.push(d);
            moments.push(c.cross(&d));
        }
    }
    PluckerImage { width: intr.width, height: intr.height, directions, moments }
}

/// Splatted view of a point cloud. Pixel arrays are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionFrame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f64>,
    pub conf: Vec<f32>,
    pub mask: Vec<bool>,
}

impl ProjectionFrame {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        ProjectionFrame {
            width,
            height,
            rgb: vec![[0.0; 3]; n],
            depth: vec![f64::INFINITY; n],
            conf: vec![0.0; n],
            mask: vec![false; n],
        }
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }
}

/// Pixel hit by a camera-space point, if it survives culling.
pub fn pixel_of(intr: &CameraIntrinsics, p: &Vector3<f64>) -> Option<(usize, usize)> {
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let (u, v) = intr.project(p);
    let (px, py) = (u.floor(), v.floor());
    if px >= 0.0 && py >= 0.0 && px < intr.width as f64 && py < intr.height as f64 {
        Some((px as usize, py as usize))
    } else {
        None
    }
}

/// Nearest-pixel splatting with a z-buffer; the first point wins exact ties.
pub fn project_point_cloud(pc: &ConfidentPointCloud, pose: &CameraPose, intr: &CameraIntrinsics) -> ProjectionFrame {
    let mut out = ProjectionFrame::empty(intr.width, intr.height);
    for (i, p) in pc.positions.iter().enumerate() {
        let q = pose.apply(p);
        if let Some((x, y)) = pixel_of(intr, &q) {
            let k = y * intr.width + x;
            if q.z < out.depth[k] {
                out.depth[k] = q.z;
                out.rgb[k] = pc.colors[i];
                out.conf[k] = pc.confidence[i];
                out.mask[k] = true;
            }
        }
    }
    out
}

/// Least-squares rigid transform taking `src` onto `dst`.
pub fn kabsch_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<CameraPose, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::Degenerate(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(GeometryError::Degenerate(format!("need at least 3 points, got {}", src.len())));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = 0.0f64;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - cs, d - cd);
        h += a * b.transpose();
        spread = spread.max(a.norm()).max(b.norm());
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if spread == 0.0 || sv[1] <= 1e-9 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(GeometryError::Degenerate("points are collinear or coincident".into()));
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(CameraPose { rotation: r, translation: cd - r * cs })
}
