//! Trajectory error after rigid alignment, and map memory accounting.

use nalgebra::Matrix3;
use serde::Serialize;

use crate::decoder::{register, weighted_svd_solve, RegisterOptions};
use crate::encoder::DescriptorSet;
use crate::error::Error;
use crate::geometry::{centroid, random_sample_pad, Point3, PointCloud, RigidTransform, UnitQuaternion};
use crate::io::SequenceSource;
use crate::model::Model;
use crate::Result;

/// Absolute position error of a trajectory after SE(3) alignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApeReport {
    pub errors: Vec<f64>,
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Maps predicted positions onto ground truth.
    #[serde(skip)]
    pub alignment: RigidTransform,
}

/// Least-squares rigid alignment of `pred` onto `gt`. Collinear or
/// coincident sets leave a rotation about the line free; the rotation
/// taking the principal direction of `pred` onto that of `gt` is used.
pub fn align_positions(pred: &[Point3], gt: &[Point3]) -> Result<RigidTransform> {
    let weights = vec![1.0; pred.len()];
    match weighted_svd_solve(pred, gt, &weights) {
        Ok(t) => Ok(t),
        Err(Error::IllConditioned) | Err(Error::DegenerateCorrespondences(_)) => {
            let (cp, cg) = (centroid(pred)?, centroid(gt)?);
            let (dp, dg) = (principal_direction(pred, cp), principal_direction(gt, cg));
            let rotation = match (dp, dg) {
                (Some(a), Some(b)) => {
                    let spread: f64 = pred.iter().zip(gt).map(|(p, g)| (*p - cp).dot(a) * (*g - cg).dot(b)).sum();
                    let b = if spread < 0.0 { -b } else { b };
                    rotation_between(a, b)
                }
                _ => UnitQuaternion::IDENTITY,
            };
            Ok(RigidTransform::new(rotation, cg - rotation.rotate(cp)))
        }
        Err(e) => Err(e),
    }
}

fn principal_direction(points: &[Point3], c: Point3) -> Option<Point3> {
    let mut m = Matrix3::zeros();
    for p in points {
        let v = (*p - c).to_vector();
        m += v * v.transpose();
    }
    let eig = m.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    (eig.eigenvalues[k] > 1e-18).then(|| Point3::from_vector(&eig.eigenvectors.column(k).into_owned()))
}

/// Smallest rotation taking unit vector `a` to unit vector `b`.
fn rotation_between(a: Point3, b: Point3) -> UnitQuaternion {
    let c = a.dot(b);
    if c < -1.0 + 1e-12 {
        let helper = if a.x.abs() < 0.9 { Point3::new(1.0, 0.0, 0.0) } else { Point3::new(0.0, 1.0, 0.0) };
        let axis = a.cross(helper);
        return UnitQuaternion::from_axis_angle(axis / axis.norm(), std::f64::consts::PI);
    }
    let w = a.cross(b);
    UnitQuaternion::new_normalize(1.0 + c, w.x, w.y, w.z)
}

/// Translation APE of `pred` against `gt` after rigid alignment.
pub fn ape_evaluate(pred: &[RigidTransform], gt: &[RigidTransform]) -> Result<ApeReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, available: pred.len() });
    }
    let p: Vec<Point3> = pred.iter().map(|t| t.translation).collect();
    let g: Vec<Point3> = gt.iter().map(|t| t.translation).collect();
    let alignment = align_positions(&p, &g)?;
    let errors: Vec<f64> = p.iter().zip(&g).map(|(a, b)| alignment.apply_point(*a).distance(*b)).collect();
    Ok(report_from_errors(errors, alignment))
}

fn report_from_errors(errors: Vec<f64>, alignment: RigidTransform) -> ApeReport {
    let n = errors.len() as f64;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    ApeReport {
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: errors.iter().sum::<f64>() / n,
        median,
        max: sorted.last().copied().unwrap_or(0.0),
        errors,
        alignment,
    }
}

/// Byte counts of a descriptor map against the raw clouds it summarizes,
/// both at 32-bit float storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryReport {
    pub descriptor_count: usize,
    pub feature_dim: usize,
    pub raw_points: usize,
    pub descriptor_bytes: usize,
    pub raw_bytes: usize,
    pub ratio: f64,
}

/// Accounting from counts: descriptors take `(3 + C)` floats, raw points 3.
pub fn memory_from_counts(descriptor_count: usize, feature_dim: usize, raw_points: usize) -> MemoryReport {
    let descriptor_bytes = descriptor_count * (3 + feature_dim) * 4;
    let raw_bytes = raw_points * 3 * 4;
    let ratio = if descriptor_bytes == 0 {
        0.0
    } else if raw_bytes == 0 {
        f64::INFINITY
    } else {
        descriptor_bytes as f64 / raw_bytes as f64
    };
    MemoryReport { descriptor_count, feature_dim, raw_points, descriptor_bytes, raw_bytes, ratio }
}

pub fn memory_report(descriptor_map: &[DescriptorSet], raw: &[PointCloud]) -> MemoryReport {
    let count = descriptor_map.iter().map(|d| d.len()).sum();
    let dim = descriptor_map.iter().find(|d| !d.is_empty()).map_or(0, |d| d.feats.cols());
    let raw_points = raw.iter().map(|c| c.valid_count()).sum();
    memory_from_counts(count, dim, raw_points)
}

/// Rotation (degrees) and translation (m) error of one registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairError {
    pub rotation_deg: f64,
    pub translation: f64,
}

impl PairError {
    pub fn between(estimate: &RigidTransform, truth: &RigidTransform) -> PairError {
        PairError {
            rotation_deg: estimate.rotation.angle_to(truth.rotation).to_degrees(),
            translation: estimate.translation.distance(truth.translation),
        }
    }
}

/// Registers frame `i` onto frame `i + gap` for every `i`, each sampled to
/// `sample_n` points. Failed registrations are `None`.
pub fn registration_errors(
    model: &Model,
    seq: &SequenceSource,
    gap: usize,
    sample_n: usize,
    options: RegisterOptions,
    seed: u64,
) -> Result<Vec<Option<PairError>>> {
    let poses = seq.poses.as_deref().ok_or_else(|| Error::Config("sequence has no poses".into()))?;
    let mut out = Vec::new();
    for i in 0..seq.len().saturating_sub(gap) {
        let j = i + gap;
        let src = random_sample_pad(&seq.frames[i], sample_n, seed.wrapping_add(2 * i as u64));
        let dst = random_sample_pad(&seq.frames[j], sample_n, seed.wrapping_add(2 * i as u64 + 1));
        let truth = poses[j].inverse().compose(&poses[i]);
        out.push(register(model, &src, &dst, options).ok().map(|r| PairError::between(&r.transform, &truth)));
    }
    Ok(out)
}
