//! Continuous 6D rotation parameterization.
//!
//! A rotation is stored as the first two columns of its matrix (`a1 ‖ a2`).
//! Any pair of non-parallel 3-vectors maps to a proper rotation through
//! Gram–Schmidt orthonormalization, which makes the representation usable as
//! an unconstrained regression target.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::HandError;

/// Minimum norm of either half-vector.
pub const MIN_HALF_NORM: f64 = 1e-8;
/// Minimum angle (radians) between the two half-vectors.
pub const MIN_HALF_ANGLE: f64 = 1e-6;
/// Orthonormality tolerance accepted by [`matrix_to_rot6d`].
pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>, HandError> {
        rot6d_to_matrix(self)
    }
}

impl Default for Rotation6D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn check_halves(a1: &Vector3<f64>, a2: &Vector3<f64>) -> Result<(f64, f64), HandError> {
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1 > MIN_HALF_NORM) || !(n2 > MIN_HALF_NORM) {
        return Err(HandError::DegenerateInput(format!(
            "6D half-vector norms too small: {n1:e}, {n2:e}"
        )));
    }
    let sin_angle = a1.cross(a2).norm() / (n1 * n2);
    if !(sin_angle >= MIN_HALF_ANGLE.sin()) {
        return Err(HandError::DegenerateInput(
            "6D half-vectors are (anti-)parallel".into(),
        ));
    }
    Ok((n1, n2))
}

/// Gram–Schmidt map from a 6D vector to a proper rotation matrix.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>, HandError> {
    let a1 = r.first();
    let a2 = r.second();
    let (n1, _) = check_halves(&a1, &a2)?;
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let b2 = u / u.norm();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: maps `dL/dM` to `dL/dr`.
pub fn rot6d_to_matrix_backward(
    r: &Rotation6D,
    grad_m: &Matrix3<f64>,
) -> Result<[f64; 6], HandError> {
    let a1 = r.first();
    let a2 = r.second();
    let (n1, _) = check_halves(&a1, &a2)?;
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let nu = u.norm();
    let b2 = u / nu;

    let g1: Vector3<f64> = grad_m.column(0).into();
    let g2: Vector3<f64> = grad_m.column(1).into();
    let g3: Vector3<f64> = grad_m.column(2).into();

    // b3 = b1 x b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);

    // b2 = u / |u|
    let gu = (gb2 - b2 * b2.dot(&gb2)) / nu;

    // u = a2 - <b1, a2> b1
    let ga2 = gu - b1 * b1.dot(&gu);
    gb1 += -gu * b1.dot(&a2) - a2 * b1.dot(&gu);

    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;

    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// Reads off the first two columns of a rotation matrix.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rotation6D, HandError> {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    if !(err <= ORTHONORMAL_TOL) || !((m.determinant() - 1.0).abs() <= ORTHONORMAL_TOL) {
        return Err(HandError::NotARotation(err));
    }
    Ok(Rotation6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]))
}

/// Rodrigues formula; `axis_angle` is axis scaled by angle in radians.
pub fn axis_angle_to_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let angle = axis_angle.norm();
    if angle < 1e-12 {
        return Matrix3::identity();
    }
    let k = axis_angle / angle;
    let kx = k.cross_matrix();
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian6(rng: &mut ChaCha8Rng) -> Rotation6D {
        let mut r = [0.0; 6];
        for v in r.iter_mut() {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            *v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        Rotation6D(r)
    }

    #[test]
    fn identity_and_scaled_identity() {
        let m = rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(m, Matrix3::identity());
        let m = rot6d_to_matrix(&Rotation6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn random_inputs_give_proper_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let m = rot6d_to_matrix(&gaussian6(&mut rng)).unwrap();
            let e = (m.transpose() * m - Matrix3::identity()).abs().max();
            assert!(e < 1e-6, "orthonormality error {e}");
            assert!((m.determinant() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(
            rot6d_to_matrix(&Rotation6D([0.0; 6])),
            Err(HandError::DegenerateInput(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 1e-9, 0.0, 0.0])),
            Err(HandError::DegenerateInput(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&Rotation6D([1.0, 2.0, 3.0, -2.0, -4.0, -6.0])),
            Err(HandError::DegenerateInput(_))
        ));
    }

    #[test]
    fn column_read_off() {
        assert_eq!(
            matrix_to_rot6d(&Matrix3::identity()).unwrap(),
            Rotation6D::IDENTITY
        );
        let rz = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let r = matrix_to_rot6d(&rz).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r.0.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_rotation_rejected() {
        let m = Matrix3::identity() * 2.0;
        assert!(matches!(matrix_to_rot6d(&m), Err(HandError::NotARotation(_))));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matrix_to_rot6d(&reflection).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let r = gaussian6(&mut rng);
            let w = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let f = |r: &Rotation6D| rot6d_to_matrix(r).unwrap().component_mul(&w).sum();
            let g = rot6d_to_matrix_backward(&r, &w).unwrap();
            for k in 0..6 {
                let h = 1e-6;
                let mut rp = r;
                rp.0[k] += h;
                let mut rm = r;
                rm.0[k] -= h;
                let fd = (f(&rp) - f(&rm)) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[k]);
            }
        }
    }
}
