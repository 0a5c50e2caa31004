//! Rigid transforms, pinhole projection and sweep aggregation.
//!
//! Coordinates are in meters, pixel coordinates are continuous. A point is
//! visible in a camera when its camera-frame depth is strictly positive and
//! its pixel falls inside the half-open rectangle `[0, width) x [0, height)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1. Invalid
    /// rotations are rejected, never re-orthonormalized.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let gram = rotation.transpose() * rotation;
        let max_dev = (gram - Matrix3::identity()).amax();
        if max_dev > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (max |R^T R - I| = {max_dev:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation by `yaw` radians about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            c, -s, 0.0,
            s, c, 0.0,
            0.0, 0.0, 1.0,
        );
        Self { rotation, translation }
    }

    /// Rotation about a unit axis (Rodrigues) followed by a translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Result<Self> {
        let norm = axis.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidTransform("rotation axis must be nonzero".into()));
        }
        let rotation = *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix();
        Self::new(rotation, translation)
    }

    /// Parses a row-major 4x4 homogeneous matrix whose bottom row must be `0 0 0 1`.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::InvalidTransform(format!(
                "expected 16 values, got {}",
                values.len()
            )));
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidTransform(format!(
                "bottom row must be 0 0 0 1, got {bottom:?}"
            )));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v[0], v[1], v[2]]
    }

    /// `a.compose(&b)` applies `b` first, then `a`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Free-function form of [`RigidTransform::compose`]: applying the result
/// equals applying `b` then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    matrix: Matrix3<f64>,
    width: u32,
    height: u32,
}

impl CameraIntrinsics {
    pub fn new(matrix: Matrix3<f64>, width: u32, height: u32) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite entry".into()));
        }
        if matrix[(2, 0)] != 0.0 || matrix[(2, 1)] != 0.0 || matrix[(2, 2)] != 1.0 {
            return Err(Error::InvalidIntrinsics("last row must be (0, 0, 1)".into()));
        }
        if !(matrix[(0, 0)] > 0.0 && matrix[(1, 1)] > 0.0) {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics("image dimensions must be nonzero".into()));
        }
        Ok(Self { matrix, width, height })
    }

    pub fn from_focal(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0), width, height)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.matrix;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

/// An intrinsic model paired with the LiDAR-to-camera extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: RigidTransform,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, extrinsic: RigidTransform) -> Self {
        Self { intrinsics, extrinsic }
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Projects a single LiDAR-frame point; `None` when outside the frustum.
    pub fn project_point(&self, p: &[f64; 3]) -> Option<(f64, f64, f64)> {
        let pc = self.extrinsic.apply(p);
        let z = pc[2];
        if !(z > 0.0) {
            return None;
        }
        let uvw = self.intrinsics.matrix * Vector3::new(pc[0], pc[1], pc[2]);
        let u = uvw[0] / z;
        let v = uvw[1] / z;
        let in_bounds =
            u >= 0.0 && u < f64::from(self.intrinsics.width) && v >= 0.0 && v < f64::from(self.intrinsics.height);
        in_bounds.then_some((u, v, z))
    }

    /// Inverse of [`Camera::project_point`]: lifts a pixel at `depth` back to the LiDAR frame.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let k_inv = self
            .intrinsics
            .matrix
            .try_inverse()
            .expect("validated intrinsics are invertible");
        let pc = k_inv * Vector3::new(u * depth, v * depth, depth);
        self.extrinsic.inverse().apply(&[pc[0], pc[1], pc[2]])
    }

    /// Unit ray direction (LiDAR frame) through continuous pixel `(u, v)`, and the camera center.
    pub fn pixel_ray(&self, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
        let origin = self.extrinsic.inverse().apply(&[0.0, 0.0, 0.0]);
        let far = self.back_project(u, v, 1.0);
        let d = Vector3::new(far[0] - origin[0], far[1] - origin[1], far[2] - origin[2]).normalize();
        ([d[0], d[1], d[2]], origin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    attrs: Vec<f64>,
    attr_width: usize,
    timestamp: f64,
}

impl PointCloud {
    /// `attrs` is row-major `N x attr_width`.
    pub fn new(coords: Vec<[f64; 3]>, attrs: Vec<f64>, attr_width: usize, timestamp: f64) -> Result<Self> {
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        if attrs.len() != coords.len() * attr_width {
            return Err(Error::InvalidCloud(format!(
                "attribute buffer holds {} values, expected {} x {}",
                attrs.len(),
                coords.len(),
                attr_width
            )));
        }
        Ok(Self {
            coords,
            attrs,
            attr_width,
            timestamp,
        })
    }

    pub fn empty(attr_width: usize, timestamp: f64) -> Self {
        Self {
            coords: Vec::new(),
            attrs: Vec::new(),
            attr_width,
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn attrs(&self) -> &[f64] {
        &self.attrs
    }

    pub fn attr_width(&self) -> usize {
        self.attr_width
    }

    pub fn attr_row(&self, i: usize) -> &[f64] {
        &self.attrs[i * self.attr_width..(i + 1) * self.attr_width]
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    /// Keeps only the first `width` attribute columns.
    pub fn truncate_attrs(&self, width: usize) -> Result<PointCloud> {
        if width > self.attr_width {
            return Err(Error::ShapeMismatch(format!(
                "cannot keep {width} of {} attribute columns",
                self.attr_width
            )));
        }
        let attrs = (0..self.len())
            .flat_map(|i| self.attr_row(i)[..width].iter().copied())
            .collect();
        Ok(PointCloud {
            coords: self.coords.clone(),
            attrs,
            attr_width: width,
            timestamp: self.timestamp,
        })
    }

    /// Keeps the listed points, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let attrs = indices.iter().flat_map(|&i| self.attr_row(i).iter().copied()).collect();
        PointCloud {
            coords,
            attrs,
            attr_width: self.attr_width,
            timestamp: self.timestamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelProjection {
    pub point_index: usize,
    pub camera_index: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PixelProjection {
    /// Integer pixel used for label lookups (floor, consistent with the half-open frustum).
    pub fn pixel(&self) -> (usize, usize) {
        (self.u.floor() as usize, self.v.floor() as usize)
    }
}

/// Projects every point of `cloud` through `extr` and `cam`, keeping only
/// in-frustum points, in ascending point order.
pub fn project_points(cloud: &PointCloud, cam: &CameraIntrinsics, extr: &RigidTransform) -> Vec<PixelProjection> {
    let camera = Camera::new(*cam, *extr);
    project_into_camera(cloud, &camera, 0)
}

pub fn project_into_camera(cloud: &PointCloud, camera: &Camera, camera_index: usize) -> Vec<PixelProjection> {
    cloud
        .coords
        .iter()
        .enumerate()
        .filter_map(|(point_index, p)| {
            camera.project_point(p).map(|(u, v, depth)| PixelProjection {
                point_index,
                camera_index,
                u,
                v,
                depth,
            })
        })
        .collect()
}

/// Applies `t` to every coordinate; attributes and timestamp are carried over.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    if t.is_identity() {
        return cloud.clone();
    }
    PointCloud {
        coords: cloud.coords.iter().map(|p| t.apply(p)).collect(),
        attrs: cloud.attrs.clone(),
        attr_width: cloud.attr_width,
        timestamp: cloud.timestamp,
    }
}

/// Value of the provenance column for keyframe points; sweep `s` (0-based)
/// is tagged `s + 1`.
pub const KEYFRAME_PROVENANCE: f64 = 0.0;

/// Concatenates the keyframe with every sweep mapped into the keyframe frame.
///
/// The output has one extra trailing attribute column holding the provenance
/// tag of each point. Near-coincident points are kept.
pub fn aggregate_sweeps(keyframe: &PointCloud, sweeps: &[(PointCloud, RigidTransform)]) -> Result<PointCloud> {
    let width = keyframe.attr_width;
    for (s, (sweep, _)) in sweeps.iter().enumerate() {
        if sweep.attr_width != width {
            return Err(Error::ShapeMismatch(format!(
                "sweep {s} has {} attribute columns, keyframe has {width}",
                sweep.attr_width
            )));
        }
    }
    let total = keyframe.len() + sweeps.iter().map(|(c, _)| c.len()).sum::<usize>();
    let mut coords = Vec::with_capacity(total);
    let mut attrs = Vec::with_capacity(total * (width + 1));

    let mut push = |cloud: &PointCloud, t: Option<&RigidTransform>, tag: f64| {
        for i in 0..cloud.len() {
            let p = &cloud.coords[i];
            coords.push(t.map_or(*p, |t| t.apply(p)));
            attrs.extend_from_slice(cloud.attr_row(i));
            attrs.push(tag);
        }
    };
    push(keyframe, None, KEYFRAME_PROVENANCE);
    for (s, (sweep, t)) in sweeps.iter().enumerate() {
        push(sweep, Some(t), (s + 1) as f64);
    }
    Ok(PointCloud {
        coords,
        attrs,
        attr_width: width + 1,
        timestamp: keyframe.timestamp,
    })
}

/// Transform taking sweep coordinates into the keyframe frame, given both
/// sensor-to-world poses.
pub fn sweep_to_keyframe(keyframe_pose: &RigidTransform, sweep_pose: &RigidTransform) -> RigidTransform {
    keyframe_pose.inverse().compose(sweep_pose)
}
