//! Orthonormal bases of trace-free symmetric matrices.

use nalgebra::Matrix3;
use serde::Serialize;

/// Canonical basis, Frobenius-orthonormal.
///
/// * 2D: `diag(1,-1)/√2`, `(e12 + e21)/√2`
/// * 3D: `diag(1,-1,0)/√2`, `diag(1,1,-2)/√6`, `(e12 + e21)/√2`,
///   `(e13 + e31)/√2`, `(e23 + e32)/√2`
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrainBasis {
    pub dim: usize,
    pub elements: Vec<Matrix3<f64>>,
}

fn sym_pair(k: usize, l: usize) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    m[(k, l)] = std::f64::consts::FRAC_1_SQRT_2;
    m[(l, k)] = std::f64::consts::FRAC_1_SQRT_2;
    m
}

impl StrainBasis {
    pub fn new(dim: usize) -> Self {
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        let elements = match dim {
            2 => vec![Matrix3::from_diagonal(&[s2, -s2, 0.0].into()), sym_pair(0, 1)],
            3 => {
                let s6 = 1.0 / 6f64.sqrt();
                vec![
                    Matrix3::from_diagonal(&[s2, -s2, 0.0].into()),
                    Matrix3::from_diagonal(&[s6, s6, -2.0 * s6].into()),
                    sym_pair(0, 1),
                    sym_pair(0, 2),
                    sym_pair(1, 2),
                ]
            }
            _ => panic!("unsupported dimension {dim}"),
        };
        Self { dim, elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn coords(&self, m: &Matrix3<f64>) -> Vec<f64> {
        self.elements.iter().map(|e| e.dot(m)).collect()
    }

    pub fn matrix(&self, coords: &[f64]) -> Matrix3<f64> {
        self.elements
            .iter()
            .zip(coords)
            .fold(Matrix3::zeros(), |acc, (e, c)| acc + e * *c)
    }
}
