//! Small shared numeric helpers: lattice quantization, quaternion and
//! rotation utilities, and the Rodrigues exponential map used by the
//! bundle-adjustment solver.

use nalgebra::{Matrix3, Vector3};

/// Integer lattice key of a point quantized at cell size `eps`.
///
/// Rounding is half-away-from-zero (Rust's `f64::round`), which keeps the
/// center sets platform-stable. Occupancy and dedup always go through this
/// key rather than comparing floating-point centers.
pub fn lattice_key(p: &Vector3<f64>, eps: f64) -> [i64; 3] {
    [
        (p.x / eps).round() as i64,
        (p.y / eps).round() as i64,
        (p.z / eps).round() as i64,
    ]
}

/// Center of the lattice cell with the given key.
pub fn lattice_center(key: [i64; 3], eps: f64) -> Vector3<f64> {
    Vector3::new(key[0] as f64 * eps, key[1] as f64 * eps, key[2] as f64 * eps)
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix from a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Backward pass of [`quat_to_matrix`]: maps dL/dR to dL/dq for a unit
/// quaternion input (the normalization backward is chained separately).
pub fn quat_to_matrix_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = d_r;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Unit quaternion `[w, x, y, z]` of a rotation matrix, canonicalized to
/// a non-negative `w` component.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let mut q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    for c in q.iter_mut() {
        *c /= norm;
    }
    if q[0] < 0.0 {
        for c in q.iter_mut() {
            *c = -*c;
        }
    }
    q
}

/// Rodrigues formula: rotation matrix of an axis-angle vector.
///
/// Switches to the second-order Taylor expansion of the coefficients for
/// very small angles.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let (a, b) = if theta_sq < 1e-12 {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let hat = skew(omega);
    Matrix3::identity() + hat * a + hat * hat * b
}

/// Checks `R^T R = I` and `det R = 1` within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).norm();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lattice_rounding_is_half_away_from_zero() {
        assert_eq!(lattice_key(&Vector3::new(0.5, -0.5, 1.5), 1.0), [1, -1, 2]);
        assert_eq!(lattice_key(&Vector3::new(0.25, -0.25, 0.0), 0.5), [1, -1, 0]);
    }

    #[test]
    fn quat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let omega = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let r = so3_exp(&omega);
            assert!(is_rotation(&r, 1e-12));
            let q = matrix_to_quat(&r);
            let r2 = quat_to_matrix(&q);
            assert!((r - r2).norm() < 1e-12);
            assert!(q[0] >= 0.0);
        }
    }

    #[test]
    fn quat_matrix_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let raw = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 0.1 {
                continue;
            }
            let q = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
            let d_r = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let grad = quat_to_matrix_backward(&q, &d_r);
            let h = 1e-6;
            for i in 0..4 {
                let mut qp = q;
                qp[i] += h;
                let mut qm = q;
                qm[i] -= h;
                // Unnormalized perturbation: quat_to_matrix is a polynomial in q.
                let fp = (quat_to_matrix(&qp).component_mul(&d_r)).sum();
                let fm = (quat_to_matrix(&qm).component_mul(&d_r)).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (grad[i] - fd).abs() <= 1e-6 * grad[i].abs().max(fd.abs()).max(1.0),
                    "component {i}: analytic {} fd {}",
                    grad[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn so3_exp_small_angle() {
        let r = so3_exp(&Vector3::new(1e-9, -2e-9, 3e-10));
        assert!(is_rotation(&r, 1e-14));
    }
}
