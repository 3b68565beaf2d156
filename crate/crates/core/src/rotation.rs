//! Axis-angle rotations and their derivatives.
//!
//! Rotations are parameterized by a rotation vector `ω` whose direction is the
//! axis and whose norm is the angle in radians. The conversion uses the
//! Rodrigues form `R = I + a(θ)[ω]× + b(θ)[ω]×²` with
//! `a = sin θ / θ` and `b = (1 − cos θ) / θ²`; below [`SERIES_CUTOFF`] the
//! coefficients and their derivatives switch to Taylor series.

use nalgebra::{Matrix3, Vector3};
use std::f64::consts::TAU;

/// Angle below which Rodrigues coefficients are evaluated by Taylor series.
pub const SERIES_CUTOFF: f64 = 1e-4;

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `a`, `b` and their scaled derivatives `c = a'(θ)/θ`, `d = b'(θ)/θ`.
fn coefficients(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SERIES_CUTOFF {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / t2;
        (
            a,
            b,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = coefficients(omega.norm());
    let k = skew(omega);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix together with `∂R/∂ω_i` for `i = 0, 1, 2`.
pub fn rodrigues_with_jacobian(omega: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, c, d) = coefficients(omega.norm());
    let k = skew(omega);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let mut jac = [Matrix3::zeros(); 3];
    for (i, out) in jac.iter_mut().enumerate() {
        let e = skew(&Vector3::ith(i, 1.0));
        *out = e * a + (e * k + k * e) * b + k * (c * omega[i]) + k2 * (d * omega[i]);
    }
    (r, jac)
}

/// Back-propagate a gradient with respect to `R` onto `ω`.
pub fn rodrigues_vjp(jac: &[Matrix3<f64>; 3], grad_r: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        jac[0].component_mul(grad_r).sum(),
        jac[1].component_mul(grad_r).sum(),
        jac[2].component_mul(grad_r).sum(),
    )
}

/// Wrap the angle of an axis-angle vector into `[0, 2π)` without changing the
/// rotation it represents.
pub fn canonicalize(omega: [f64; 3]) -> [f64; 3] {
    let v = Vector3::from(omega);
    let n = v.norm();
    if n < TAU || !n.is_finite() {
        return omega;
    }
    let wrapped = n.rem_euclid(TAU);
    (v * (wrapped / n)).into()
}

/// Apply [`canonicalize`] to every consecutive triple of a flat slice.
pub fn canonicalize_all(values: &mut [f64]) {
    for chunk in values.chunks_exact_mut(3) {
        let c = canonicalize([chunk[0], chunk[1], chunk[2]]);
        chunk.copy_from_slice(&c);
    }
}
