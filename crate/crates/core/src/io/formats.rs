//! Cloud, label, pose and trajectory files.
//!
//! Clouds are little-endian f32 `(x, y, z, intensity)` records. Poses are
//! one row-major 3×4 `[R | t]` per line. Trajectories are the timestamped
//! `time tx ty tz qx qy qz qw` convention.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::Matrix3;

use crate::error::Error;
use crate::geometry::{Point3, PointCloud, PointLabel, RigidTransform, UnitQuaternion};
use crate::numerics::svd3;
use crate::io::synth::SequenceSource;
use crate::Result;

const RECORD: usize = 16;

/// A scan with its per-point intensity kept for lossless rewriting.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScan {
    pub cloud: PointCloud,
    pub intensity: Vec<f32>,
}

pub fn parse_scan(bytes: &[u8]) -> Result<RawScan> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::format(
            "cloud",
            format!(
                "{} bytes is not a multiple of {RECORD}; trailing record at byte {} is truncated",
                bytes.len(),
                bytes.len() - bytes.len() % RECORD
            ),
        ));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    let mut intensity = Vec::with_capacity(bytes.len() / RECORD);
    for rec in bytes.chunks_exact(RECORD) {
        points.push(Point3::new(f(&rec[0..4]) as f64, f(&rec[4..8]) as f64, f(&rec[8..12]) as f64));
        intensity.push(f(&rec[12..16]));
    }
    Ok(RawScan {
        cloud: PointCloud::new(points),
        intensity,
    })
}

pub fn read_scan(path: &Path) -> Result<RawScan> {
    parse_scan(&fs::read(path)?)
}

/// Reads a binary cloud; intensities are discarded.
pub fn read_cloud_bin(path: &Path) -> Result<PointCloud> {
    Ok(read_scan(path)?.cloud)
}

pub fn encode_scan(cloud: &PointCloud, intensity: Option<&[f32]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        let w = intensity.and_then(|v| v.get(i).copied()).unwrap_or(0.0);
        for v in [p.x as f32, p.y as f32, p.z as f32, w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes every point (valid or not) with the given intensities, zero if absent.
pub fn write_cloud_bin(path: &Path, cloud: &PointCloud, intensity: Option<&[f32]>) -> Result<()> {
    fs::write(path, encode_scan(cloud, intensity))?;
    Ok(())
}

/// Per-point `u32` class ids; the lower 16 bits are the semantic class.
pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            "labels",
            format!("{} bytes is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn write_labels(path: &Path, ids: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = ids.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Semantic ids of moving classes (the 252–259 "moving-*" range).
pub fn is_moving_class(id: u32) -> bool {
    (252..=259).contains(&(id & 0xffff))
}

pub fn labels_from_ids(ids: &[u32]) -> Vec<PointLabel> {
    ids.iter()
        .map(|&id| if is_moving_class(id) { PointLabel::Dynamic } else { PointLabel::Static })
        .collect()
}

/// Class ids written for generated labels.
pub fn ids_from_labels(labels: &[PointLabel]) -> Vec<u32> {
    labels
        .iter()
        .map(|l| match l {
            PointLabel::Dynamic => 252,
            PointLabel::Static => 40,
        })
        .collect()
}

fn parse_line<const N: usize>(line: &str, lineno: usize, context: &str) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut fields = line.split_whitespace();
    for (i, slot) in out.iter_mut().enumerate() {
        let tok = fields.next().ok_or_else(|| {
            Error::format(context, format!("line {lineno}: expected {N} values, found {i}"))
        })?;
        *slot = tok.parse().map_err(|_| {
            Error::format(context, format!("line {lineno}, field {}: cannot parse {tok:?}", i + 1))
        })?;
    }
    if fields.next().is_some() {
        return Err(Error::format(context, format!("line {lineno}: more than {N} values")));
    }
    Ok(out)
}

/// Raw row-major 3×4 matrices, one per non-empty line.
pub fn read_pose_matrices(path: &Path) -> Result<Vec<[f64; 12]>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line::<12>(&line, i + 1, "poses")?);
    }
    Ok(out)
}

pub fn write_pose_matrices(path: &Path, rows: &[[f64; 12]]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for m in rows {
        let text: Vec<String> = m.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", text.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Converts a 3×4 matrix, projecting the rotation block onto SO(3) when it
/// is more than 1e-6 from orthonormal.
pub fn transform_from_matrix(m: &[f64; 12]) -> RigidTransform {
    let mut r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let drift = (r.transpose() * r - Matrix3::identity()).abs().max();
    if drift > 1e-6 {
        warn!("rotation block off SO(3) by {drift:.3e}; orthonormalizing");
        let svd = svd3(&r);
        let mut v = svd.v;
        if (svd.u * v.transpose()).determinant() < 0.0 {
            v.column_mut(2).neg_mut();
        }
        r = svd.u * v.transpose();
    }
    RigidTransform::from_matrix_parts(&r, Point3::new(m[3], m[7], m[11]))
}

pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    Ok(read_pose_matrices(path)?.iter().map(transform_from_matrix).collect())
}

pub fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    let rows: Vec<[f64; 12]> = poses.iter().map(|p| p.to_matrix_3x4()).collect();
    write_pose_matrices(path, &rows)
}

/// Timestamped trajectory, `time tx ty tz qx qy qz qw` per line.
pub fn write_trajectory(path: &Path, stamps: &[f64], poses: &[RigidTransform]) -> Result<()> {
    if stamps.len() != poses.len() {
        return Err(Error::LengthMismatch(stamps.len(), poses.len()));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (t, p) in stamps.iter().zip(poses) {
        let (q, x) = (p.rotation, p.translation);
        writeln!(w, "{} {} {} {} {} {} {} {}", t, x.x, x.y, x.z, q.x, q.y, q.z, q.s)?;
    }
    w.flush()?;
    Ok(())
}

/// Quaternions already unit to within 1e-12 are taken verbatim (after
/// sign canonicalization) so written trajectories read back bit-exactly.
pub fn read_trajectory(path: &Path) -> Result<(Vec<f64>, Vec<RigidTransform>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let (mut stamps, mut poses) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_line::<8>(line, i + 1, "trajectory")?;
        let (s, x, y, z) = (v[7], v[4], v[5], v[6]);
        let n2 = s * s + x * x + y * y + z * z;
        let q = if (n2 - 1.0).abs() < 1e-12 {
            let k = if s < 0.0 { -1.0 } else { 1.0 };
            UnitQuaternion { s: s * k, x: x * k, y: y * k, z: z * k }
        } else {
            UnitQuaternion::new_normalize(s, x, y, z)
        };
        stamps.push(v[0]);
        poses.push(RigidTransform::new(q, Point3::new(v[1], v[2], v[3])));
    }
    Ok((stamps, poses))
}

/// Writes `velodyne/NNNNNN.bin`, `labels/NNNNNN.label` (when labeled) and
/// `poses.txt` (when present) under `dir`.
pub fn save_sequence(dir: &Path, seq: &SequenceSource) -> Result<()> {
    let clouds = dir.join("velodyne");
    fs::create_dir_all(&clouds)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_cloud_bin(&clouds.join(format!("{i:06}.bin")), frame, None)?;
        if let Some(labels) = &frame.labels {
            let label_dir = dir.join("labels");
            fs::create_dir_all(&label_dir)?;
            write_labels(&label_dir.join(format!("{i:06}.label")), &ids_from_labels(labels))?;
        }
    }
    if let Some(poses) = &seq.poses {
        write_poses(&dir.join("poses.txt"), poses)?;
    }
    Ok(())
}

/// Reads a sequence directory in the layout of [`save_sequence`]. Frames are
/// taken in file-name order; labels and poses are optional.
pub fn load_sequence(dir: &Path) -> Result<SequenceSource> {
    let mut files: Vec<_> = fs::read_dir(dir.join("velodyne"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    let mut frames = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let mut cloud = read_cloud_bin(path)?.with_frame_id(i);
        let label_path = dir.join("labels").join(path.with_extension("label").file_name().unwrap());
        if label_path.exists() {
            let ids = read_labels(&label_path)?;
            if ids.len() != cloud.len() {
                return Err(Error::format(
                    label_path.display().to_string(),
                    format!("{} labels for {} points", ids.len(), cloud.len()),
                ));
            }
            cloud.labels = Some(labels_from_ids(&ids));
        }
        frames.push(cloud);
    }
    let pose_path = dir.join("poses.txt");
    let poses = if pose_path.exists() { Some(read_poses(&pose_path)?) } else { None };
    SequenceSource::new(frames, poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_records() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, -4.0, 5.5, 0.25, 9.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let scan = parse_scan(&bytes).unwrap();
        assert_eq!(scan.cloud.points, vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-4.0, 5.5, 0.25)]);
        assert_eq!(encode_scan(&scan.cloud, Some(&scan.intensity)), bytes);
    }

    #[test]
    fn empty_and_truncated() {
        assert!(parse_scan(&[]).unwrap().cloud.is_empty());
        let err = parse_scan(&[0u8; 20]).unwrap_err().to_string();
        assert!(err.contains("byte 16"), "{err}");
    }

    #[test]
    fn pose_lines() {
        let id = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(transform_from_matrix(&id), RigidTransform::IDENTITY);
        let mut tr = id;
        tr[3] = 1.5;
        tr[11] = -2.0;
        let t = transform_from_matrix(&tr);
        assert_eq!(t.rotation, UnitQuaternion::IDENTITY);
        assert_eq!(t.translation, Point3::new(1.5, 0.0, -2.0));
        let err = parse_line::<12>("1 0 0", 7, "poses").unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
    }

    #[test]
    fn drifted_rotation_is_projected() {
        let m = [1.001, 0.0, 0.0, 0.0, 0.0, 0.999, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let t = transform_from_matrix(&m);
        assert!(t.rotation.angle() < 1e-9);
    }

    #[test]
    fn moving_classes() {
        assert!(is_moving_class(252) && is_moving_class(259 | (7 << 16)));
        assert!(!is_moving_class(40) && !is_moving_class(260));
    }
}
