use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// A point (or free vector) in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance_squared(self, o: Point3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        let dz = self.z - o.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn distance(self, o: Point3) -> f64 {
        self.distance_squared(o).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Point3;
    fn div(self, s: f64) -> Point3 {
        Point3::new(self.x / s, self.y / s, self.z / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointLabel {
    Static,
    Dynamic,
}

/// An ordered point set. Every point carries a validity flag so that padding
/// inserted by fixed-size sampling is never mistaken for a real return.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<PointLabel>>,
    pub valid: Vec<bool>,
    pub frame_id: usize,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        let valid = vec![true; points.len()];
        Self {
            points,
            labels: None,
            valid,
            frame_id: 0,
        }
    }

    pub fn with_labels(points: Vec<Point3>, labels: Vec<PointLabel>) -> Self {
        assert_eq!(points.len(), labels.len(), "labels must match points");
        let mut cloud = Self::new(points);
        cloud.labels = Some(labels);
        cloud
    }

    pub fn with_frame_id(mut self, frame_id: usize) -> Self {
        self.frame_id = frame_id;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Copy of the cloud with padding removed.
    pub fn valid_only(&self) -> PointCloud {
        if self.valid.iter().all(|v| *v) {
            return self.clone();
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.valid[i]).collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            valid: indices.iter().map(|&i| self.valid[i]).collect(),
            frame_id: self.frame_id,
        }
    }

    pub fn label(&self, i: usize) -> Option<PointLabel> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Mean of the valid points.
    pub fn centroid(&self) -> crate::Result<Point3> {
        let pts: Vec<Point3> = self
            .points
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(p, _)| *p)
            .collect();
        super::centroid(&pts)
    }

    pub fn extend(&mut self, other: &PointCloud) {
        match (&mut self.labels, &other.labels) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(a), None) => a.extend(std::iter::repeat_n(PointLabel::Static, other.len())),
            (None, Some(b)) if self.points.is_empty() => self.labels = Some(b.clone()),
            (None, Some(b)) => {
                let mut l = vec![PointLabel::Static; self.points.len()];
                l.extend_from_slice(b);
                self.labels = Some(l);
            }
            (None, None) => {}
        }
        self.points.extend_from_slice(&other.points);
        self.valid.extend_from_slice(&other.valid);
    }
}

/// Rotation as a unit quaternion `[s, (x, y, z)]`, kept with `s >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        s: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes a raw 4-vector. A zero vector maps to identity.
    pub fn new_normalize(s: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (s * s + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        let sign = if s < 0.0 { -1.0 } else { 1.0 };
        let k = sign / n;
        Self {
            s: s * k,
            x: x * k,
            y: y * k,
            z: z * k,
        }
    }

    pub fn from_axis_angle(axis: Point3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (sh, ch) = (0.5 * angle).sin_cos();
        Self::new_normalize(ch, a.x * sh, a.y * sh, a.z * sh)
    }

    /// Rotation vector (axis times angle) to quaternion.
    pub fn from_rotation_vector(w: Point3) -> Self {
        let theta = w.norm();
        if theta < 1e-12 {
            return Self::new_normalize(1.0, 0.5 * w.x, 0.5 * w.y, 0.5 * w.z);
        }
        Self::from_axis_angle(w, theta)
    }

    pub fn to_rotation_vector(self) -> Point3 {
        let v = Point3::new(self.x, self.y, self.z);
        let vn = v.norm();
        if vn < 1e-12 {
            return v * (2.0 / self.s);
        }
        let angle = 2.0 * vn.atan2(self.s);
        v * (angle / vn)
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.s, self.x, self.y, self.z]
    }

    pub fn conjugate(self) -> Self {
        Self {
            s: self.s,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * o`, renormalized.
    pub fn mul(self, o: UnitQuaternion) -> Self {
        Self::new_normalize(
            self.s * o.s - self.x * o.x - self.y * o.y - self.z * o.z,
            self.s * o.x + self.x * o.s + self.y * o.z - self.z * o.y,
            self.s * o.y - self.x * o.z + self.y * o.s + self.z * o.x,
            self.s * o.z + self.x * o.y - self.y * o.x + self.z * o.s,
        )
    }

    /// `q p q⁻¹`.
    pub fn rotate(self, p: Point3) -> Point3 {
        let u = Point3::new(self.x, self.y, self.z);
        let t = u.cross(p) * 2.0;
        p + t * self.s + u.cross(t)
    }

    pub fn to_matrix(self) -> Matrix3<f64> {
        let UnitQuaternion { s, x, y, z } = self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - s * z),
            2.0 * (x * z + s * y),
            2.0 * (x * y + s * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - s * x),
            2.0 * (x * z - s * y),
            2.0 * (y * z + s * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the input should be close to SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        if tr > 0.0 {
            let r = (1.0 + tr).sqrt();
            let k = 0.5 / r;
            Self::new_normalize(
                0.5 * r,
                (m[(2, 1)] - m[(1, 2)]) * k,
                (m[(0, 2)] - m[(2, 0)]) * k,
                (m[(1, 0)] - m[(0, 1)]) * k,
            )
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let r = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            let k = 0.5 / r;
            Self::new_normalize(
                (m[(2, 1)] - m[(1, 2)]) * k,
                0.5 * r,
                (m[(0, 1)] + m[(1, 0)]) * k,
                (m[(0, 2)] + m[(2, 0)]) * k,
            )
        } else if m[(1, 1)] >= m[(2, 2)] {
            let r = (1.0 - m[(0, 0)] + m[(1, 1)] - m[(2, 2)]).sqrt();
            let k = 0.5 / r;
            Self::new_normalize(
                (m[(0, 2)] - m[(2, 0)]) * k,
                (m[(0, 1)] + m[(1, 0)]) * k,
                0.5 * r,
                (m[(1, 2)] + m[(2, 1)]) * k,
            )
        } else {
            let r = (1.0 - m[(0, 0)] - m[(1, 1)] + m[(2, 2)]).sqrt();
            let k = 0.5 / r;
            Self::new_normalize(
                (m[(1, 0)] - m[(0, 1)]) * k,
                (m[(0, 2)] + m[(2, 0)]) * k,
                (m[(1, 2)] + m[(2, 1)]) * k,
                0.5 * r,
            )
        }
    }

    /// Geodesic angle between two rotations, radians in [0, π].
    pub fn angle_to(self, o: UnitQuaternion) -> f64 {
        let d = self.conjugate().mul(o);
        let v = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        2.0 * v.atan2(d.s.abs())
    }

    pub fn angle(self) -> f64 {
        self.angle_to(Self::IDENTITY)
    }
}

/// Rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Point3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: UnitQuaternion::IDENTITY,
        translation: Point3::ZERO,
    };

    pub fn new(rotation: UnitQuaternion, translation: Point3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Point3) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn apply_point(&self, p: Point3) -> Point3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Maps every point; labels, validity and frame id are preserved.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply_point(*p)).collect(),
            labels: cloud.labels.clone(),
            valid: cloud.valid.clone(),
            frame_id: cloud.frame_id,
        }
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul(inner.rotation),
            translation: self.rotation.rotate(inner.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.conjugate();
        RigidTransform {
            rotation: r,
            translation: -r.rotate(self.translation),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_matrix_3x4(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_matrix_parts(r: &Matrix3<f64>, t: Point3) -> Self {
        Self::new(UnitQuaternion::from_matrix(r), t)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.is_finite() && self.rotation.as_array().iter().all(|v| v.is_finite())
    }
}
