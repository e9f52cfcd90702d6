//! Rotation helpers shared by the deformation pipeline.
//!
//! Quaternions are stored as `nalgebra::Quaternion<f64>` and always read in
//! `w, x, y, z` order at API boundaries. Every forward map that participates
//! in fitting has a matching vector-Jacobian product (`*_vjp`) so gradients
//! can be pulled back by hand.

use nalgebra::{Matrix3, Quaternion, Vector3, Vector4};

pub type Quat = Quaternion<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn quat(w: f64, x: f64, y: f64, z: f64) -> Quat {
    Quaternion::new(w, x, y, z)
}

pub fn identity_quat() -> Quat {
    Quaternion::new(1.0, 0.0, 0.0, 0.0)
}

/// `[w, x, y, z]`.
pub fn quat_to_array(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn quat_from_array(a: [f64; 4]) -> Quat {
    Quaternion::new(a[0], a[1], a[2], a[3])
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q.w * q.w + q.i * q.i + q.j * q.j + q.k * q.k).sqrt()
}

pub fn quat_dot(a: &Quat, b: &Quat) -> f64 {
    a.w * b.w + a.i * b.i + a.j * b.j + a.k * b.k
}

/// Scales `q` to unit length. Returns `q` unchanged when its norm is within
/// a few ulp of 1, so a normalized quaternion is a bitwise fixed point.
pub fn normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        *q
    } else {
        q / n
    }
}

/// Pulls a gradient on `normalize(q)` back to `q`.
pub fn normalize_vjp(q: &Quat, grad_unit: &Quat) -> Quat {
    let n = quat_norm(q);
    let u = q / n;
    let d = quat_dot(&u, grad_unit);
    (grad_unit - u * d) / n
}

pub fn axis_angle(axis: Vec3, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    Quaternion::new(c, a.x * s, a.y * s, a.z * s)
}

/// Rotation angle of the relative rotation between two quaternions, in
/// radians, insensitive to the sign of either argument.
pub fn rotation_angle_between(a: &Quat, b: &Quat) -> f64 {
    let r = a.conjugate() * b;
    2.0 * r.imag().norm().atan2(r.w.abs())
}

/// Rotation matrix of `q / |q|`.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let u = q / quat_norm(q);
    let (w, x, y, z) = (u.w, u.i, u.j, u.k);
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

/// Gradient of `<G, quat_to_matrix(q)>` with respect to raw `q`.
pub fn quat_to_matrix_vjp(q: &Quat, g: &Mat3) -> Quat {
    let u = q / quat_norm(q);
    let (w, x, y, z) = (u.w, u.i, u.j, u.k);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let gu = Quaternion::new(g.dot(&dw), g.dot(&dx), g.dot(&dy), g.dot(&dz));
    normalize_vjp(q, &gu)
}

/// Shepperd's method. The returned quaternion has `w >= 0`.
pub fn matrix_to_quat(m: &Mat3) -> Quat {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = if q.w < 0.0 { -q } else { q };
    normalize(&q)
}

pub fn hat(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Polar decomposition `m = r * s` with `r` a proper rotation and `s`
/// symmetric. `m` must be non-singular.
pub fn polar(m: &Mat3) -> (Mat3, Mat3) {
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let mut col = u.column_mut(imin);
        col *= -1.0;
        r = u * v_t;
    }
    let s = r.transpose() * m;
    let s = 0.5 * (s + s.transpose());
    (r, s)
}

/// Pulls a gradient on the body-frame rotation increment `omega` (defined
/// by `dR = R * hat(omega)`) back to the un-decomposed matrix.
pub fn polar_rotation_vjp(r: &Mat3, s: &Mat3, grad_omega: &Vec3) -> Mat3 {
    let k = Matrix3::identity() * s.trace() - s;
    let y = k
        .try_inverse()
        .map(|inv| inv * grad_omega)
        .unwrap_or_else(Vec3::zeros);
    r * hat(&y)
}

/// Gradient with respect to `omega` of a loss on `q`, where the rotation
/// represented by `q` is perturbed as `q (x) (0, omega / 2)`.
pub fn body_increment_vjp(q: &Quat, grad_q: &Quat) -> Vec3 {
    let mut out = Vec3::zeros();
    for k in 0..3 {
        let mut e = Vector4::zeros();
        e[k] = 0.5;
        // Quaternion::from(Vector4) takes [i, j, k, w].
        let dq = q * Quaternion::from(e);
        out[k] = quat_dot(&dq, grad_q);
    }
    out
}

/// Shortest-path spherical interpolation.
pub fn slerp(a: &Quat, b: &Quat, t: f64) -> Quat {
    let a = normalize(a);
    let mut b = normalize(b);
    let mut d = quat_dot(&a, &b);
    if d < 0.0 {
        b = -b;
        d = -d;
    }
    if d > 0.9995 {
        return normalize(&(a * (1.0 - t) + b * t));
    }
    let theta = d.acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    normalize(&(a * wa + b * wb))
}

/// Euler angles (radians) for `R = Rz(z) * Rx(x) * Ry(y)`, returned as
/// `(z, x, y)`. At |x| within 1e-4 of a right angle, `y` is pinned to zero
/// and `z` carries the remaining rotation.
pub fn matrix_to_euler_zxy(m: &Mat3) -> (f64, f64, f64) {
    let sx = m[(2, 1)].clamp(-1.0, 1.0);
    let x = sx.asin();
    if (x.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-4 {
        let z = m[(1, 0)].atan2(m[(0, 0)]);
        (z, x, 0.0)
    } else {
        let y = (-m[(2, 0)]).atan2(m[(2, 2)]);
        let z = (-m[(0, 1)]).atan2(m[(1, 1)]);
        (z, x, y)
    }
}

pub fn euler_zxy_to_matrix(z: f64, x: f64, y: f64) -> Mat3 {
    let rz = Matrix3::new(z.cos(), -z.sin(), 0.0, z.sin(), z.cos(), 0.0, 0.0, 0.0, 1.0);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, x.cos(), -x.sin(), 0.0, x.sin(), x.cos());
    let ry = Matrix3::new(y.cos(), 0.0, y.sin(), 0.0, 1.0, 0.0, -y.sin(), 0.0, y.cos());
    rz * rx * ry
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        normalize(&quat(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ))
    }

    fn random_mat(rng: &mut ChaCha8Rng) -> Mat3 {
        Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let back = matrix_to_quat(&quat_to_matrix(&q));
            assert!(rotation_angle_between(&q, &back) < 1e-7);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let q = quat(rng.gen(), rng.gen(), rng.gen(), rng.gen::<f64>() + 0.1);
            let once = normalize(&q);
            let twice = normalize(&once);
            // Either exactly fixed, or within one rounding step of unit norm.
            let n = quat_norm(&once);
            assert!((n - 1.0).abs() < 1e-15);
            assert!(rotation_angle_between(&once, &twice) < 1e-12);
        }
    }

    #[test]
    fn matrix_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_mat(&mut rng);
        let q = quat(0.7, -0.2, 0.4, 0.3);
        let analytic = quat_to_array(&quat_to_matrix_vjp(&q, &g));
        let h = 1e-6;
        for c in 0..4 {
            let mut a = quat_to_array(&q);
            a[c] += h;
            let fp = g.dot(&quat_to_matrix(&quat_from_array(a)));
            a[c] -= 2.0 * h;
            let fm = g.dot(&quat_to_matrix(&quat_from_array(a)));
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[c]).abs() < 1e-6, "component {c}: {fd} vs {}", analytic[c]);
        }
    }

    #[test]
    fn polar_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // A convex blend of two rotations, as produced by skinning.
        let r1 = quat_to_matrix(&random_quat(&mut rng));
        let r2 = quat_to_matrix(&random_quat(&mut rng));
        let m = r1 * 0.7 + r2 * 0.3;
        let gq = quat(0.3, -0.5, 0.2, 0.9);
        // loss(m) = <gq, quat(polar(m).r)>
        let loss = |m: &Mat3| {
            let (r, _) = polar(m);
            quat_dot(&gq, &matrix_to_quat(&r))
        };
        let (r, s) = polar(&m);
        let qr = matrix_to_quat(&r);
        let g_omega = body_increment_vjp(&qr, &gq);
        let analytic = polar_rotation_vjp(&r, &s, &g_omega);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut mp = m;
                mp[(i, j)] += h;
                let mut mm = m;
                mm[(i, j)] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                assert!((fd - analytic[(i, j)]).abs() < 1e-6, "({i},{j}) {fd} vs {}", analytic[(i, j)]);
            }
        }
    }

    #[test]
    fn polar_of_rotation_is_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = quat_to_matrix(&random_quat(&mut rng));
        let (pr, s) = polar(&r);
        assert!((pr - r).abs().max() < 1e-12);
        assert!((s - Mat3::identity()).abs().max() < 1e-12);
        assert!((pr.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_zxy_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let q = random_quat(&mut rng);
            let m = quat_to_matrix(&q);
            let (z, x, y) = matrix_to_euler_zxy(&m);
            assert!((euler_zxy_to_matrix(z, x, y) - m).abs().max() < 1e-9);
        }
        // Gimbal: x = +90 degrees, z absorbs the free rotation.
        let m = euler_zxy_to_matrix(0.3, std::f64::consts::FRAC_PI_2, 0.5);
        let (z, x, y) = matrix_to_euler_zxy(&m);
        assert_eq!(y, 0.0);
        assert!((euler_zxy_to_matrix(z, x, y) - m).abs().max() < 1e-9);
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = identity_quat();
        let b = axis_angle(Vec3::z(), 1.0);
        assert!(rotation_angle_between(&slerp(&a, &b, 0.0), &a) < 1e-12);
        assert!(rotation_angle_between(&slerp(&a, &b, 1.0), &b) < 1e-7);
        let mid = slerp(&a, &b, 0.5);
        assert!(rotation_angle_between(&mid, &axis_angle(Vec3::z(), 0.5)) < 1e-7);
    }
}
