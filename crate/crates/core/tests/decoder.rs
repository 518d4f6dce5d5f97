use dpm_core::decoder::{
    attention_fuse, confidence_matrix, derive_translation, dynamic_segment, importance_score, loop_closure_prob,
    offset_predict, register, similarity_match, solve_matches, weighted_svd_solve, FusedDescriptors, FusionBlock,
    MatchSet, RegisterOptions,
};
use dpm_core::encoder::DescriptorSet;
use dpm_core::geometry::{Point3, PointCloud, RigidTransform, UnitQuaternion};
use dpm_core::model::{Model, ModelConfig};
use dpm_core::numerics::gradcheck::check_gradients;
use dpm_core::numerics::{Mlp, MultiHeadAttention, ParameterStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_point(rng: &mut impl Rng, s: f64) -> Point3 {
    Point3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn rand_transform(rng: &mut impl Rng) -> RigidTransform {
    let axis = rand_point(rng, 1.0);
    RigidTransform::new(
        UnitQuaternion::from_axis_angle(axis, rng.random_range(-3.1..3.1)),
        rand_point(rng, 5.0),
    )
}

fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn errors(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    (a.rotation.angle_to(b.rotation), a.translation.distance(b.translation))
}

#[test]
fn identical_sets_give_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<Point3> = (0..20).map(|_| rand_point(&mut rng, 3.0)).collect();
    let t = weighted_svd_solve(&pts, &pts, &[1.0; 20]).unwrap();
    let (r, d) = errors(&t, &RigidTransform::IDENTITY);
    assert!(r < 1e-9 && d < 1e-9);
}

#[test]
fn exact_pairs_recover_the_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let truth = rand_transform(&mut rng);
        let src: Vec<Point3> = (0..50).map(|_| rand_point(&mut rng, 10.0)).collect();
        let dst: Vec<Point3> = src.iter().map(|p| truth.apply_point(*p)).collect();
        let t = weighted_svd_solve(&src, &dst, &[1.0; 50]).unwrap();
        let (r, d) = errors(&t, &truth);
        assert!(r < 1e-7 && d < 1e-7, "{r} {d}");
    }
}

#[test]
fn zero_weight_outliers_are_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let truth = rand_transform(&mut rng);
        let src: Vec<Point3> = (0..50).map(|_| rand_point(&mut rng, 10.0)).collect();
        let mut dst: Vec<Point3> = src.iter().map(|p| truth.apply_point(*p)).collect();
        let mut w = vec![1.0; 50];
        for i in 0..15 {
            dst[i] = rand_point(&mut rng, 20.0);
            w[i] = 0.0;
        }
        let t = weighted_svd_solve(&src, &dst, &w).unwrap();
        let (r, d) = errors(&t, &truth);
        assert!(r < 1e-7 && d < 1e-7);
        // Removing the zero-weight pairs changes nothing.
        let t2 = weighted_svd_solve(&src[15..], &dst[15..], &w[15..]).unwrap();
        assert_eq!(t, t2);
    }
}

proptest! {
    #[test]
    fn solver_output_is_a_proper_rotation_and_weight_homogeneous(seed in 0u64..10_000, k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<Point3> = (0..12).map(|_| rand_point(&mut rng, 5.0)).collect();
        let dst: Vec<Point3> = (0..12).map(|_| rand_point(&mut rng, 5.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
        let a = weighted_svd_solve(&src, &dst, &w).unwrap();
        let det = a.rotation_matrix().determinant();
        prop_assert!((det - 1.0).abs() < 1e-9);
        let ws: Vec<f64> = w.iter().map(|v| v * k).collect();
        let b = weighted_svd_solve(&src, &dst, &ws).unwrap();
        let (r, d) = errors(&a, &b);
        prop_assert!(r < 1e-12 * 100.0 && d < 1e-12 * 100.0, "{} {}", r, d);
    }
}

#[test]
fn derived_translation_matches_the_generating_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let truth = rand_transform(&mut rng);
        let src: Vec<Point3> = (0..30).map(|_| rand_point(&mut rng, 10.0)).collect();
        let dst: Vec<Point3> = src.iter().map(|p| truth.apply_point(*p)).collect();
        let t = derive_translation(truth.rotation, &src, &dst).unwrap();
        assert!(t.distance(truth.translation) < 1e-9);
    }
}

#[test]
fn similarity_matches_identical_sets_to_themselves() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = FusedDescriptors {
        coords: (0..20).map(|_| rand_point(&mut rng, 5.0)).collect(),
        feats: rand_tensor(&mut rng, 20, 8),
    };
    let m = similarity_match(&d, &d, 0.0, 1.0, 0.1).unwrap();
    for (i, (s, t)) in m.pairs.iter().enumerate() {
        assert_eq!((i, i), (*s, *t));
    }
}

#[test]
fn confidence_is_a_product_of_softmax_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..10), rng.random_range(1..10));
        let a = FusedDescriptors {
            coords: (0..n).map(|_| rand_point(&mut rng, 5.0)).collect(),
            feats: rand_tensor(&mut rng, n, 4),
        };
        let b = FusedDescriptors {
            coords: (0..m).map(|_| rand_point(&mut rng, 5.0)).collect(),
            feats: rand_tensor(&mut rng, m, 4),
        };
        let c = confidence_matrix(&a, &b, 1.0, 0.1).unwrap();
        assert!(c.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
        let s = similarity_match(&a, &b, 0.0, 1.0, 0.1).unwrap();
        let mut src: Vec<usize> = s.pairs.iter().map(|p| p.0).collect();
        src.dedup();
        assert_eq!(src.len(), s.len());
    }
}

fn small_model() -> Model {
    Model::new(ModelConfig::default(), 9).unwrap()
}

fn descriptors(rng: &mut impl Rng, n: usize, c: usize) -> DescriptorSet {
    DescriptorSet {
        coords: (0..n).map(|_| rand_point(rng, 5.0)).collect(),
        feats: rand_tensor(rng, n, c),
        source_frame: 0,
        labels: None,
    }
}

#[test]
fn single_descriptor_fusion_is_finite() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = attention_fuse(&model, &descriptors(&mut rng, 1, 32), &descriptors(&mut rng, 1, 32)).unwrap();
    assert_eq!(a.feats.shape(), [1, 32]);
    assert!(a.feats.is_finite() && b.feats.is_finite());
}

#[test]
fn fusion_is_permutation_equivariant() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let src = descriptors(&mut rng, 5, 32);
    let dst = descriptors(&mut rng, 6, 32);
    let perm = [3, 0, 5, 1, 4, 2];
    let (a1, b1) = attention_fuse(&model, &src, &dst).unwrap();
    let (a2, b2) = attention_fuse(&model, &src, &dst.select(&perm)).unwrap();
    for r in 0..5 {
        for (x, y) in a1.feats.row(r).iter().zip(a2.feats.row(r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for (r, &p) in perm.iter().enumerate() {
        for (x, y) in b2.feats.row(r).iter().zip(b1.feats.row(p)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParameterStore::new();
    let block = FusionBlock {
        self_attn: MultiHeadAttention::init(&mut store, "s", 8, 4, &mut rng).unwrap(),
        cross_attn: MultiHeadAttention::init(&mut store, "c", 8, 4, &mut rng).unwrap(),
        mlp: Mlp::init(&mut store, "m", &[8, 16, 8], &mut rng),
    };
    for i in 0..20 {
        let a = rand_tensor(&mut rng, 3, 8);
        let rows = rng.random_range(1..=4);
        let b = rand_tensor(&mut rng, rows, 8);
        let wa = rand_tensor(&mut rng, 3, 8);
        let wb = rand_tensor(&mut rng, b.rows(), 8);
        let rep = check_gradients(&[a, b], 1e-5, |g, v| {
            let (s, d) = block.forward(g, &store, v[0], v[1])?;
            let ca = g.constant(wa.clone());
            let cb = g.constant(wb.clone());
            let x = g.mul(s, ca)?;
            let y = g.mul(d, cb)?;
            let x = g.sum(x);
            let y = g.sum(y);
            g.add(x, y)
        })
        .unwrap();
        assert!(rep.max_error() < 1e-4, "case {i}: {:?}", rep.relative_errors);
    }
}

#[test]
fn zeroed_segmentation_head_keeps_everything() {
    let mut model = small_model();
    model.decoder.segmentation_mlp.last().zero(&mut model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pred = dynamic_segment(&model, &descriptors(&mut rng, 10, 32), 0.5).unwrap();
    assert!(pred.probs.data().iter().all(|p| *p == 0.5));
    assert!(pred.keep_mask.iter().all(|k| *k));
}

#[test]
fn all_dynamic_prediction_leaves_no_correspondences() {
    let mut model = small_model();
    let last = model.decoder.segmentation_mlp.last().clone();
    last.zero(&mut model.store);
    model.store.set(&last.bias, Tensor::from_rows(&[vec![10.0, -10.0]])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pts: Vec<Point3> = (0..600).map(|_| rand_point(&mut rng, 8.0)).collect();
    let cloud = PointCloud::new(pts);
    let err = register(&model, &cloud, &cloud, RegisterOptions::default()).unwrap_err();
    assert_eq!(err.to_string(), "no correspondences");
}

#[test]
fn zeroed_offset_head_leaves_pairs_unchanged() {
    let mut model = small_model();
    for l in model.decoder.offset.layers.clone() {
        l.zero(&mut model.store);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (a, b) = attention_fuse(&model, &descriptors(&mut rng, 8, 32), &descriptors(&mut rng, 8, 32)).unwrap();
    let m = similarity_match(&a, &b, 0.0, 1.0, 0.1).unwrap();
    let r = offset_predict(&model, &m, &a, &b).unwrap();
    assert_eq!(r.refined_dst_pts, m.dst_pts);
}

#[test]
fn offset_head_gradients() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let pairs: Vec<(usize, usize)> = (0..rng.random_range(1..5))
            .map(|_| (rng.random_range(0..n), rng.random_range(0..m)))
            .collect();
        let a = rand_tensor(&mut rng, n, 32);
        let b = rand_tensor(&mut rng, m, 32);
        let rep = check_gradients(&[a, b], 1e-5, |g, v| {
            let o = model.decoder.offsets(g, &model.store, v[0], v[1], &pairs)?;
            let sq = g.mul(o, o)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(rep.max_error() < 1e-4, "{:?}", rep.relative_errors);
    }
}

#[test]
fn identity_quaternion_on_aligned_pairs_gives_zero_translation() {
    let mut model = small_model();
    for name in [&model.decoder.quat_kan.base_weight.clone(), &model.decoder.quat_kan.spline_coeffs.clone()] {
        model.store.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d = descriptors(&mut rng, 10, 32);
    let (a, b) = attention_fuse(&model, &d, &d).unwrap();
    let m = MatchSet::from_points(d.coords.clone(), d.coords.clone());
    let out = importance_score(&model, &m, &a, &b).unwrap();
    assert_eq!(out.q_raw, [1.0, 0.0, 0.0, 0.0]);
    assert!(out.t_tilde.norm() < 1e-9);
    assert!(out.sigma_p.iter().all(|s| *s > 0.0 && *s < 1.0));
}

#[test]
fn importance_needs_three_pairs() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d = descriptors(&mut rng, 2, 32);
    let (a, b) = attention_fuse(&model, &d, &d).unwrap();
    let m = MatchSet::from_points(d.coords.clone(), d.coords.clone());
    let err = importance_score(&model, &m, &a, &b).unwrap_err();
    assert!(err.to_string().contains("degenerate correspondence set"));
}

#[test]
fn loop_probability_bounds() {
    let mut model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (a, b) = attention_fuse(&model, &descriptors(&mut rng, 6, 32), &descriptors(&mut rng, 7, 32)).unwrap();
    let p = loop_closure_prob(&model, &a, &b).unwrap();
    assert!(p > 0.0 && p < 1.0);
    model.decoder.loop_out.last().zero(&mut model.store);
    assert_eq!(loop_closure_prob(&model, &a, &b).unwrap(), 0.5);
}

#[test]
fn oracle_correspondences_recover_the_transform_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let truth = RigidTransform::new(
        UnitQuaternion::from_axis_angle(Point3::new(0.0, 0.0, 1.0), 0.05),
        Point3::new(0.3, -0.1, 0.02),
    );
    let dst: Vec<Point3> = (0..40).map(|_| rand_point(&mut rng, 10.0)).collect();
    let src: Vec<Point3> = dst.iter().map(|p| truth.inverse().apply_point(*p)).collect();
    let m = MatchSet::from_points(src, dst);
    let reg = solve_matches(&m, &[1.0; 40], 0.1).unwrap();
    let (r, d) = errors(&reg.transform, &truth);
    assert!(r < 1e-9 && d < 1e-9);
    assert!(reg.rmse < 1e-9);
}

#[test]
fn registration_is_equivariant_with_oracle_correspondences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..20 {
        let base = rand_transform(&mut rng);
        let extra = rand_transform(&mut rng);
        let src: Vec<Point3> = (0..30).map(|_| rand_point(&mut rng, 10.0)).collect();
        let dst: Vec<Point3> = src.iter().map(|p| base.apply_point(*p)).collect();
        let moved: Vec<Point3> = src.iter().map(|p| extra.apply_point(*p)).collect();
        let a = solve_matches(&MatchSet::from_points(src, dst.clone()), &[1.0; 30], 0.1).unwrap();
        let b = solve_matches(&MatchSet::from_points(moved, dst), &[1.0; 30], 0.1).unwrap();
        let expect = a.transform.compose(&extra.inverse());
        let (r, d) = errors(&b.transform, &expect);
        assert!(r < 1e-9 && d < 1e-9);
    }
}
