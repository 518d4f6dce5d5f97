//! SE(3) exponential and logarithm on `[ρ; ω]` twists (translation part
//! first), adjoints and the small-angle series used near the identity.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::geometry::{Point3, RigidTransform, UnitQuaternion};

const SMALL_ANGLE: f64 = 1e-6;

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Left Jacobian of SO(3), `V` in `t = V ρ`.
fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

fn left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

pub fn exp(xi: &Vector6<f64>) -> RigidTransform {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let rotation = UnitQuaternion::from_rotation_vector(Point3::from_vector(&w));
    let t = left_jacobian(&w) * rho;
    RigidTransform::new(rotation, Point3::from_vector(&t))
}

pub fn log(t: &RigidTransform) -> Vector6<f64> {
    let w = t.rotation.to_rotation_vector().to_vector();
    let rho = left_jacobian_inverse(&w) * t.translation.to_vector();
    Vector6::new(rho.x, rho.y, rho.z, w.x, w.y, w.z)
}

/// `Ad_T` such that `T·exp(ξ)·T⁻¹ = exp(Ad_T ξ)`.
pub fn adjoint(t: &RigidTransform) -> Matrix6<f64> {
    let r = t.rotation_matrix();
    let tr = hat(&t.translation.to_vector()) * r;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m
}

/// Inverse right Jacobian to first order, `I + ½ ad(ξ)`.
pub fn right_jacobian_inverse_approx(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&w));
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&rho));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&hat(&w));
    Matrix6::identity() + ad * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for scale in [1e-9, 1e-7, 1e-3, 0.5, 1.7] {
            for _ in 0..50 {
                let xi = Vector6::from_fn(|_, _| rng.random_range(-scale..scale));
                let back = log(&exp(&xi));
                assert!((back - xi).norm() < 1e-9 * (1.0 + xi.norm()), "{xi} vs {back}");
            }
        }
    }

    #[test]
    fn adjoint_conjugates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = exp(&Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let xi = Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5));
        let lhs = t.compose(&exp(&xi)).compose(&t.inverse());
        let rhs = exp(&(adjoint(&t) * xi));
        assert!((log(&lhs) - log(&rhs)).norm() < 1e-12);
    }

    #[test]
    fn pure_translation() {
        let t = exp(&Vector6::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));
        assert_eq!(t.translation, Point3::new(1.0, 2.0, 3.0));
        assert_eq!(t.rotation, UnitQuaternion::IDENTITY);
    }
}
