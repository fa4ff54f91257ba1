//! Intrinsic XYZ Euler angles, `R = Rx(θx) · Ry(θy) · Rz(θz)`, and their partial derivatives.

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)]
use num_traits::Float;

fn rx(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = (a.sin(), a.cos());
    (
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
    )
}

fn ry(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = (a.sin(), a.cos());
    (
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
    )
}

fn rz(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = (a.sin(), a.cos());
    (
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    )
}

pub fn euler_xyz(angles: &Vector3<f64>) -> Matrix3<f64> {
    rx(angles.x).0 * ry(angles.y).0 * rz(angles.z).0
}

/// `∂R/∂θx, ∂R/∂θy, ∂R/∂θz`.
pub fn euler_xyz_derivatives(angles: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (x, dx) = rx(angles.x);
    let (y, dy) = ry(angles.y);
    let (z, dz) = rz(angles.z);
    [dx * y * z, x * dy * z, x * y * dz]
}
