use dpm_core::geometry::{Point3, PointLabel, RigidTransform, UnitQuaternion};
use dpm_core::numerics::gradcheck::check_gradients;
use dpm_core::numerics::{Graph, Tensor};
use dpm_core::training::losses::*;
use nalgebra::Matrix3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn rand_point(rng: &mut impl Rng, s: f64) -> Point3 {
    Point3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

/// Source points and jittered copies, so some pairs fall inside the radius.
fn pair_layout(rng: &mut impl Rng, m: usize, n: usize) -> PairClassification {
    let src: Vec<Point3> = (0..m).map(|_| rand_point(rng, 3.0)).collect();
    let dst: Vec<Point3> = (0..n).map(|k| src[k % m] + rand_point(rng, 0.4)).collect();
    classify_pairs(&src, &dst, 1.0)
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[dpm_core::numerics::Var]) -> dpm_core::Result<dpm_core::numerics::Var>) {
    let rep = check_gradients(inputs, H, f).unwrap();
    assert!(rep.max_error() < TOL, "{name}: {:?}", rep.relative_errors);
}

#[test]
fn coarse_and_fine_pairing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, n, c) = (rng.random_range(2..7), rng.random_range(2..8), rng.random_range(2..6));
        let pairs = pair_layout(&mut rng, m, n);
        let inputs = [rand_tensor(&mut rng, m, c, 1.0), rand_tensor(&mut rng, n, c, 1.0)];
        check("coarse", &inputs, |g, v| coarse_pairing_loss(g, v[0], v[1], &pairs, 0.2));
        check("pairing", &inputs, |g, v| pairing_loss(g, v[0], v[1], &pairs, 0.2));
    }
}

#[test]
fn offset_gradients_under_random_covariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let p = rng.random_range(1..9);
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let sigma = a * a.transpose() + Matrix3::identity() * 0.5;
        let target = rand_tensor(&mut rng, p, 3, 1.0);
        check("offset", &[rand_tensor(&mut rng, p, 3, 1.0)], |g, v| offset_loss(g, v[0], &target, &sigma));
    }
}

#[test]
fn importance_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = rng.random_range(3..10);
        let src: Vec<Point3> = (0..p).map(|_| rand_point(&mut rng, 3.0)).collect();
        let dst: Vec<Point3> = (0..p).map(|_| rand_point(&mut rng, 3.0)).collect();
        let inputs = [rand_tensor(&mut rng, 1, 4, 1.0), rand_tensor(&mut rng, p, 1, 2.0)];
        check("importance", &inputs, |g, v| {
            Ok(importance_scoring_loss(g, v[0], v[1], &src, &dst, 0.5, 0.2)?.total)
        });
    }
}

#[test]
fn dynamic_segmentation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(4..16);
        let labels: Vec<PointLabel> = (0..n)
            .map(|k| if k == 0 || rng.random_bool(0.2) { PointLabel::Dynamic } else { PointLabel::Static })
            .collect();
        check("dynamic", &[rand_tensor(&mut rng, n, 2, 2.0)], |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            Ok(dynamic_seg_loss_ohem(g, v[0], &labels, &mut r)?.0)
        });
    }
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let mut g = Graph::new();
    let vals = [1.0, 2.0, 3.0, 4.0, 5.0];
    let v: Vec<_> = vals.iter().map(|&x| g.input(Tensor::from_vec(1, 1, vec![x]).unwrap())).collect();
    let parts = LossComponents { coarse: v[0], pairing: v[1], offset: v[2], importance: v[3], dynamic: v[4] };
    let w = LossWeights::default();
    let total = total_registration_loss(&mut g, &parts, &w).unwrap();
    let scalar = LossComponents { coarse: 1.0, pairing: 2.0, offset: 3.0, importance: 4.0, dynamic: 5.0 };
    assert!((g.value(total).item() - scalar.weighted_total(&w)).abs() < 1e-12);
}

/// Score loss on exactly aligned pairs for a uniform score value.
fn zero_residual_score_loss(score: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = RigidTransform::new(
        UnitQuaternion::from_rotation_vector(rand_point(&mut rng, 0.5)),
        rand_point(&mut rng, 2.0),
    );
    let src: Vec<Point3> = (0..12).map(|_| rand_point(&mut rng, 5.0)).collect();
    let dst: Vec<Point3> = src.iter().map(|p| t.apply_point(*p)).collect();
    let mut g = Graph::new();
    let q = t.rotation.as_array();
    let q = g.input(Tensor::from_vec(1, 4, q.to_vec()).unwrap());
    let logit = (score / (1.0 - score)).ln();
    let s = g.input(Tensor::from_vec(12, 1, vec![logit; 12]).unwrap());
    let loss = importance_scoring_loss(&mut g, q, s, &src, &dst, 0.5, 0.2).unwrap();
    assert!(g.value(loss.rotation).item().abs() < 1e-9);
    g.value(loss.total).item()
}

#[test]
fn scores_cannot_collapse_on_zero_residuals() {
    let grid = [0.01, 0.1, 0.5, 0.9, 0.99];
    let losses: Vec<f64> = grid.iter().map(|&s| zero_residual_score_loss(s)).collect();
    for w in losses.windows(2) {
        assert!(w[0] > w[1], "{losses:?}");
    }
    assert!(zero_residual_score_loss(0.999999) < losses[4]);
}

proptest! {
    #[test]
    fn ohem_takes_the_hardest_statics(seed in 0u64..100_000, n in 1usize..200, dyn_frac in 0.0f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<PointLabel> = (0..n)
            .map(|_| if rng.random_bool(dyn_frac) { PointLabel::Dynamic } else { PointLabel::Static })
            .collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let sel = ohem_select(&probs, &labels, &mut rng).unwrap();
        let dynamic = labels.iter().filter(|l| **l == PointLabel::Dynamic).count();
        let statics = n - dynamic;
        prop_assert_eq!(sel.dynamic.len(), dynamic);
        if dynamic == 0 {
            prop_assert!(sel.hard_static.is_empty());
            prop_assert_eq!(sel.random_static.len(), statics.min(ZERO_DYNAMIC_STATICS));
        } else {
            prop_assert_eq!(sel.hard_static.len(), (3 * dynamic).min(statics));
            let worst_kept = sel.hard_static.iter().map(|&i| probs[i]).fold(f64::MIN, f64::max);
            for i in 0..n {
                if labels[i] == PointLabel::Static && !sel.hard_static.contains(&i) {
                    prop_assert!(probs[i] >= worst_kept);
                }
            }
        }
    }
}
