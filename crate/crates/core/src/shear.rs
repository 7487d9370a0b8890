//! Closed-form shear diffeomorphism of the plane,
//! `g(x) = (x1, h(x1) x1 + x2)` with `h(s) = 2 sin s + cos 5s - 3s`.
//!
//! Its preimage of the unit disk is a curved region on which the plain
//! gradient flow of `|g(x) - g(x*)|^2` can leave the set for off-centre
//! goals, while the natural gradient flow cannot.

use nalgebra::DMatrix;

use crate::bilip::Diffeomorphism;
use crate::error::BiLipError;
use crate::StateVec;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ShearMap;

pub fn shear_h(s: f64) -> f64 {
    2.0 * s.sin() + (5.0 * s).cos() - 3.0 * s
}

fn shear_h_prime(s: f64) -> f64 {
    2.0 * s.cos() - 5.0 * (5.0 * s).sin() - 3.0
}

pub fn shear_forward(x: &StateVec) -> StateVec {
    StateVec::from_row_slice(&[x[0], shear_h(x[0]) * x[0] + x[1]])
}

pub fn shear_inverse(z: &StateVec) -> StateVec {
    StateVec::from_row_slice(&[z[0], z[1] - shear_h(z[0]) * z[0]])
}

/// Lower triangular with unit diagonal.
pub fn shear_jacobian(x: &StateVec) -> DMatrix<f64> {
    let s = x[0];
    let k = shear_h(s) + s * shear_h_prime(s);
    DMatrix::from_row_slice(2, 2, &[1.0, 0.0, k, 1.0])
}

impl Diffeomorphism for ShearMap {
    fn dim(&self) -> usize {
        2
    }

    fn forward(&self, x: &StateVec) -> StateVec {
        shear_forward(x)
    }

    fn jacobian(&self, x: &StateVec) -> DMatrix<f64> {
        shear_jacobian(x)
    }

    fn inverse(&self, z: &StateVec, _tol: f64, _max_iter: usize) -> Result<StateVec, BiLipError> {
        Ok(shear_inverse(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(a: f64, b: f64) -> StateVec {
        StateVec::from_row_slice(&[a, b])
    }

    #[test]
    fn vertical_axis_is_fixed() {
        assert_eq!(shear_forward(&v(0.0, 0.7)), v(0.0, 0.7));
    }

    #[test]
    fn value_at_unit_abscissa() {
        let z = shear_forward(&v(1.0, 0.0));
        let expected = 2.0 * 1f64.sin() + 5f64.cos() - 3.0;
        assert_eq!(z[0], 1.0);
        assert!((z[1] - expected).abs() < 1e-15);
        assert!((z[1] - (-1.033_395_845)).abs() < 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for &(a, b) in &[(0.3, -0.2), (-0.9, 0.4), (0.77, 1.3)] {
            let x = v(a, b);
            let j = shear_jacobian(&x);
            let h = 1e-6;
            for c in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let fd = (shear_forward(&xp) - shear_forward(&xm)) / (2.0 * h);
                for r in 0..2 {
                    assert!((fd[r] - j[(r, c)]).abs() < 1e-8);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn closed_form_round_trip(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = v(a, b);
            let back = shear_inverse(&shear_forward(&x));
            prop_assert_eq!(back[0], x[0]);
            prop_assert!((back[1] - x[1]).abs() <= 1e-12 * (1.0 + x[1].abs() + (shear_h(a) * a).abs()));
        }
    }
}
