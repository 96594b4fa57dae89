use std::sync::Arc;

use super::Potential;

/// A smooth vector field `γ: R^m -> R^m` driving the direction-reversal flow.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, q: &[f64], out: &mut [f64]);
    /// Row-major `m x m` Jacobian, `out[i*m + j] = ∂_j γ_i`.
    fn jacobian(&self, q: &[f64], out: &mut [f64]);
}

/// `γ = A ∇V` for an antisymmetric `A`. Such a field leaves `exp(-V)`
/// invariant: it is divergence free with respect to that density.
#[derive(Clone)]
pub struct RotatedGradient {
    potential: Arc<dyn Potential>,
    a: Vec<f64>,
}

impl RotatedGradient {
    pub fn new(potential: Arc<dyn Potential>, a: Vec<f64>) -> Self {
        let m = potential.dim();
        assert_eq!(a.len(), m * m);
        for i in 0..m {
            for j in 0..m {
                assert!(a[i * m + j] == -a[j * m + i], "matrix must be antisymmetric");
            }
        }
        RotatedGradient { potential, a }
    }

    /// Planar rotation `A = [[0, 1], [-1, 0]]`.
    pub fn planar(potential: Arc<dyn Potential>) -> Self {
        Self::new(potential, vec![0.0, 1.0, -1.0, 0.0])
    }
}

impl VectorField for RotatedGradient {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn eval(&self, q: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut g = crate::linalg::zeros_vec(m);
        self.potential.gradient(q, &mut g);
        crate::linalg::mat_vec(&self.a, &g, out);
    }

    fn jacobian(&self, q: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut h = crate::linalg::zeros(m * m);
        self.potential.hessian(q, &mut h);
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = (0..m).map(|k| self.a[i * m + k] * h[k * m + j]).sum();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::*;
    use crate::model::{Circle, Quadratic};

    #[test]
    fn rotation_of_gaussian_gradient() {
        let f = RotatedGradient::planar(Arc::new(Quadratic::isotropic(2, 1.0)));
        let mut out = [0.0; 2];
        f.eval(&[0.3, -0.7], &mut out);
        assert_eq!(out, [-0.7, -0.3]);
    }

    #[test]
    fn jacobian_matches_fd() {
        let f = RotatedGradient::planar(Arc::new(Circle::default()));
        let q = [0.8, 0.5];
        let mut j = [0.0; 4];
        f.jacobian(&q, &mut j);
        assert_close(&j, &fd_jacobian(|x, o| f.eval(x, o), &q, 2, 1e-6), 1e-6);
    }

    #[test]
    #[should_panic]
    fn rejects_non_antisymmetric() {
        RotatedGradient::new(Arc::new(Quadratic::isotropic(2, 1.0)), vec![1.0, 0.0, 0.0, 1.0]);
    }
}
