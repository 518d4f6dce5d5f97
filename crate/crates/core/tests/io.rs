use dpm_core::geometry::{Point3, PointCloud, PointLabel, RigidTransform, UnitQuaternion};
use dpm_core::io::eval::{align_positions, memory_from_counts};
use dpm_core::io::formats::parse_scan;
use dpm_core::io::synth::MoverSpec;
use dpm_core::io::*;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_transform(rng: &mut impl Rng, scale: f64) -> RigidTransform {
    let q = UnitQuaternion::new_normalize(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let t = Point3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    );
    RigidTransform::new(q, t)
}

#[test]
fn cloud_fixture_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    let mut bytes = Vec::new();
    for v in [0.5f32, -1.25, 3.0, 7.0, 1e-3, 2.5e4, -0.0, 0.1] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, &bytes).unwrap();
    let cloud = read_cloud_bin(&path).unwrap();
    assert_eq!(cloud.len(), 2);
    assert_eq!(cloud.points[0], Point3::new(0.5, -1.25, 3.0));
    assert_eq!(cloud.points[1], Point3::new(1e-3f32 as f64, 2.5e4, -0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<u8> = (0..16 * 257).map(|_| rng.random()).collect();
    let raw: Vec<u8> = raw
        .chunks_exact(4)
        .flat_map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let v = if v.is_finite() { v } else { 1.0 };
            v.to_le_bytes()
        })
        .collect();
    std::fs::write(&path, &raw).unwrap();
    let scan = read_scan(&path).unwrap();
    let out = dir.path().join("b.bin");
    write_cloud_bin(&out, &scan.cloud, Some(&scan.intensity)).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), raw);
}

#[test]
fn empty_and_truncated_clouds() {
    assert!(parse_scan(&[]).unwrap().cloud.is_empty());
    for len in [1, 15, 17, 47] {
        let err = parse_scan(&vec![0u8; len]).unwrap_err().to_string();
        assert!(err.contains(&format!("byte {}", len - len % 16)), "{err}");
    }
}

#[test]
fn pose_lines_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poses.txt");
    std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 2.5 0 1 0 -1 0 0 1 0.125\n").unwrap();
    let poses = read_poses(&path).unwrap();
    assert_eq!(poses[0], RigidTransform::IDENTITY);
    assert_eq!(poses[1].rotation, UnitQuaternion::IDENTITY);
    assert_eq!(poses[1].translation, Point3::new(2.5, -1.0, 0.125));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses: Vec<RigidTransform> = (0..100).map(|_| random_transform(&mut rng, 100.0)).collect();
    write_poses(&path, &poses).unwrap();
    let back = read_poses(&path).unwrap();
    for (a, b) in poses.iter().zip(&back) {
        assert!(a.rotation.angle_to(b.rotation) < 1e-12);
        assert!(a.translation.distance(b.translation) < 1e-12);
    }
    let rows: Vec<[f64; 12]> = poses.iter().map(|p| p.to_matrix_3x4()).collect();
    write_pose_matrices(&path, &rows).unwrap();
    assert_eq!(read_pose_matrices(&path).unwrap(), rows);
}

#[test]
fn malformed_pose_line_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poses.txt");
    std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 x 0\n").unwrap();
    let err = read_poses(&path).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("field 11"), "{err}");
    std::fs::write(&path, "1 0 0\n").unwrap();
    assert!(read_poses(&path).unwrap_err().to_string().contains("line 1"));
}

#[test]
fn trajectory_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.txt");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let poses: Vec<RigidTransform> = (0..200).map(|_| random_transform(&mut rng, 50.0)).collect();
    let stamps: Vec<f64> = (0..200).map(|i| i as f64 * 0.1).collect();
    write_trajectory(&path, &stamps, &poses).unwrap();
    let (s, p) = read_trajectory(&path).unwrap();
    assert_eq!(s, stamps);
    assert_eq!(p, poses);
}

#[test]
fn labels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.label");
    let ids = vec![40, 252, 259 | (3 << 16), 10];
    write_labels(&path, &ids).unwrap();
    assert_eq!(read_labels(&path).unwrap(), ids);
    use dpm_core::io::formats::labels_from_ids;
    assert_eq!(
        labels_from_ids(&ids),
        vec![PointLabel::Static, PointLabel::Dynamic, PointLabel::Dynamic, PointLabel::Static]
    );
}

fn small_scene() -> SyntheticSceneConfig {
    SyntheticSceneConfig { frames: 6, azimuth_steps: 60, ..Default::default() }
}

#[test]
fn noiseless_static_points_lie_on_geometry() {
    let seq = synth_sequence(&small_scene()).unwrap();
    for (frame, pose) in seq.source.frames.iter().zip(seq.poses()) {
        let labels = frame.labels.as_ref().unwrap();
        for (p, l) in frame.points.iter().zip(labels) {
            if *l == PointLabel::Static {
                let w = pose.apply_point(*p);
                let d = seq.primitives.iter().map(|g| g.surface_distance(w).abs()).fold(f64::INFINITY, f64::min);
                assert!(d < 1e-9, "point {w:?} off geometry by {d}");
            }
        }
    }
}

#[test]
fn noise_fraction_and_clamp() {
    let clean = synth_sequence(&small_scene()).unwrap();
    let noisy = synth_sequence(&SyntheticSceneConfig { noise_ratio: 0.5, ..small_scene() }).unwrap();
    for (a, b) in clean.source.frames.iter().zip(&noisy.source.frames) {
        assert_eq!(a.len(), b.len());
        let mut moved = 0;
        for (p, q) in a.points.iter().zip(&b.points) {
            let d = *q - *p;
            if d != Point3::ZERO {
                moved += 1;
            }
            let bound = 0.2 + 1e-12;
            assert!(d.x.abs() <= bound && d.y.abs() <= bound && d.z.abs() <= bound);
        }
        assert!(moved as f64 <= 0.5 * a.len() as f64);
        assert!(moved as f64 >= 0.45 * a.len() as f64);
    }
}

#[test]
fn movers_shift_by_velocity() {
    let cfg = SyntheticSceneConfig {
        frames: 4,
        azimuth_steps: 30,
        clutter: 0,
        movers: vec![MoverSpec { center: [5.0, 3.0, 1.0], size: [2.0, 1.0, 1.0], velocity: [1.0, 0.0, 0.0] }],
        points_per_mover: 50,
        ..Default::default()
    };
    let seq = synth_sequence(&cfg).unwrap();
    let world_dynamic: Vec<Vec<Point3>> = seq
        .source
        .frames
        .iter()
        .zip(seq.poses())
        .map(|(f, pose)| {
            f.points
                .iter()
                .zip(f.labels.as_ref().unwrap())
                .filter(|(_, l)| **l == PointLabel::Dynamic)
                .map(|(p, _)| pose.apply_point(*p))
                .collect()
        })
        .collect();
    for w in world_dynamic.windows(2) {
        assert_eq!(w[0].len(), 50);
        for (a, b) in w[0].iter().zip(&w[1]) {
            assert!((*b - *a - Point3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        }
    }
}

#[test]
fn synthesis_is_reproducible() {
    let cfg = SyntheticSceneConfig { noise_ratio: 0.3, mover_count: 2, ..small_scene() };
    let a = synth_sequence(&cfg).unwrap();
    let b = synth_sequence(&cfg).unwrap();
    assert_eq!(a.source, b.source);
    let c = synth_sequence(&SyntheticSceneConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.source, c.source);
}

#[test]
fn sequence_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticSceneConfig { mover_count: 1, ..small_scene() };
    let seq = synth_sequence(&cfg).unwrap().source;
    save_sequence(dir.path(), &seq).unwrap();
    let back = load_sequence(dir.path()).unwrap();
    assert_eq!(back.len(), seq.len());
    for (a, b) in seq.frames.iter().zip(&back.frames) {
        assert_eq!(a.labels, b.labels);
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!(p.distance(*q) < 1e-5);
        }
    }
    let (p, q) = (seq.poses.unwrap(), back.poses.unwrap());
    for (a, b) in p.iter().zip(&q) {
        assert!(a.rotation.angle_to(b.rotation) < 1e-12 && a.translation.distance(b.translation) < 1e-12);
    }
}

fn line_trajectory(n: usize) -> Vec<RigidTransform> {
    (0..n)
        .map(|i| {
            let a = i as f64 * 0.3;
            RigidTransform::new(
                UnitQuaternion::from_axis_angle(Point3::new(0.0, 0.0, 1.0), a),
                Point3::new(5.0 * a.cos(), 3.0 * a.sin(), 0.2 * i as f64),
            )
        })
        .collect()
}

#[test]
fn ape_identical_and_shifted() {
    let gt = line_trajectory(10);
    let r = ape_evaluate(&gt, &gt).unwrap();
    assert!(r.rmse < 1e-12 && r.max < 1e-12);
    let shift = RigidTransform::from_translation(Point3::new(3.0, -2.0, 1.0));
    let moved: Vec<_> = gt.iter().map(|p| shift.compose(p)).collect();
    assert!(ape_evaluate(&moved, &gt).unwrap().rmse < 1e-9);
    assert!(ape_evaluate(&gt[..3], &gt).is_err());
    assert!(ape_evaluate(&gt[..1], &gt[..1]).is_err());
}

#[test]
fn ape_invariant_to_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = line_trajectory(12);
    let mut pred = gt.clone();
    for p in pred.iter_mut() {
        p.translation += Point3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
    }
    let base = ape_evaluate(&pred, &gt).unwrap();
    for _ in 0..50 {
        let t = random_transform(&mut rng, 20.0);
        let moved: Vec<_> = pred.iter().map(|p| t.compose(p)).collect();
        let r = ape_evaluate(&moved, &gt).unwrap();
        assert!((r.rmse - base.rmse).abs() < 1e-9, "{} vs {}", r.rmse, base.rmse);
    }
}

/// Independent Kabsch alignment used as the APE oracle.
fn kabsch_rmse(pred: &[Point3], gt: &[Point3]) -> f64 {
    let n = pred.len() as f64;
    let cp = pred.iter().fold(Vector3::zeros(), |a, p| a + p.to_vector()) / n;
    let cg = gt.iter().fold(Vector3::zeros(), |a, p| a + p.to_vector()) / n;
    let mut h = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        h += (p.to_vector() - cp) * (g.to_vector() - cg).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    d[(2, 2)] = (vt.transpose() * u.transpose()).determinant().signum();
    let r = vt.transpose() * d * u.transpose();
    let t = cg - r * cp;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (r * p.to_vector() + t - g.to_vector()).norm_squared()).sum();
    (sum / n).sqrt()
}

#[test]
fn ape_single_displaced_frame_matches_oracle() {
    let gt = line_trajectory(10);
    let mut pred = gt.clone();
    pred[4].translation += Point3::new(1.0, 0.0, 0.0);
    let r = ape_evaluate(&pred, &gt).unwrap();
    let p: Vec<_> = pred.iter().map(|t| t.translation).collect();
    let g: Vec<_> = gt.iter().map(|t| t.translation).collect();
    let oracle = kabsch_rmse(&p, &g);
    assert!((r.rmse - oracle).abs() < 1e-10, "{} vs {oracle}", r.rmse);
    assert!(r.rmse > 0.0 && r.rmse < 1.0 / 10f64.sqrt());
}

#[test]
fn collinear_trajectories_align() {
    let gt: Vec<RigidTransform> =
        (0..8).map(|i| RigidTransform::from_translation(Point3::new(i as f64, 0.0, 0.0))).collect();
    let rot = RigidTransform::new(
        UnitQuaternion::from_axis_angle(Point3::new(0.3, 0.4, 0.5) / Point3::new(0.3, 0.4, 0.5).norm(), 1.1),
        Point3::new(2.0, 1.0, -1.0),
    );
    let pred: Vec<_> = gt.iter().map(|p| rot.compose(p)).collect();
    assert!(ape_evaluate(&pred, &gt).unwrap().rmse < 1e-9);
    let same = vec![Point3::new(1.0, 2.0, 3.0); 4];
    let t = align_positions(&same, &[Point3::ZERO; 4]).unwrap();
    assert!(t.apply_point(same[0]).norm() < 1e-12);
}

#[test]
fn memory_accounting() {
    let r = memory_from_counts(64, 32, 1024);
    assert!((r.ratio - 0.729).abs() < 1e-3);
    assert_eq!(memory_report(&[], &[PointCloud::new(vec![Point3::ZERO; 10])]).ratio, 0.0);
    let mut last = f64::INFINITY;
    for raw in [256, 512, 1024, 4096, 16384] {
        let ratio = memory_from_counts(64, 32, raw).ratio;
        assert!(ratio < last);
        last = ratio;
    }
}
