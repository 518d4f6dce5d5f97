//! Singular value decomposition of 3×3 matrices by one-sided Jacobi rotations.

use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    /// Descending, non-negative.
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

const MAX_SWEEPS: usize = 64;

/// `m = U·diag(S)·Vᵀ` with orthogonal `U`, `V`. Not differentiable.
pub fn svd3(m: &Matrix3<f64>) -> Svd3 {
    let mut a = *m;
    let mut v = Matrix3::identity();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha = a.column(p).norm_squared();
            let beta = a.column(q).norm_squared();
            let gamma = a.column(p).dot(&a.column(q));
            if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for r in 0..3 {
                let (ap, aq) = (a[(r, p)], a[(r, q)]);
                a[(r, p)] = c * ap - s * aq;
                a[(r, q)] = s * ap + c * aq;
                let (vp, vq) = (v[(r, p)], v[(r, q)]);
                v[(r, p)] = c * vp - s * vq;
                v[(r, q)] = s * vp + c * vq;
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = [a.column(0).norm(), a.column(1).norm(), a.column(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut s = Vector3::zeros();
    let smax = norms[order[0]];
    let mut rank = 0;
    for (k, &i) in order.iter().enumerate() {
        s[k] = norms[i];
        vs.set_column(k, &v.column(i));
        if norms[i] > 1e-14 * smax && norms[i] > 0.0 {
            u.set_column(k, &(a.column(i) / norms[i]));
            rank += 1;
        }
    }
    // Complete U to an orthonormal basis where singular values vanish.
    if rank == 0 {
        u = Matrix3::identity();
    } else if rank < 3 {
        let u0: Vector3<f64> = u.column(0).into();
        let u1: Vector3<f64> = if rank >= 2 {
            u.column(1).into()
        } else {
            let axis = (0..3)
                .min_by(|&i, &j| u0[i].abs().total_cmp(&u0[j].abs()))
                .unwrap_or(0);
            let mut e = Vector3::zeros();
            e[axis] = 1.0;
            (e - u0 * u0.dot(&e)).normalize()
        };
        u.set_column(1, &u1);
        u.set_column(2, &u0.cross(&u1));
    }
    Svd3 { u, s, v: vs }
}
