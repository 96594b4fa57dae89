//! Target densities and Hamiltonians.
//!
//! The Riemannian-manifold Hamiltonian
//! `H(q, p) = V(q) - ½ ln det D(q) + ½ pᵀ D(q) p`
//! has the marginal `exp(-V)` in `q` and conditional `N(0, D(q)⁻¹)` in `p`.

mod diffusion;
mod field;
mod hamiltonian;
mod potential;

pub use diffusion::{
    Anisotropic, ConstantDiffusion, CosineSquared, DiffusionField, OnePlusSquare,
};
pub use field::{RotatedGradient, VectorField};
pub use hamiltonian::{Hamiltonian, RmhmcHamiltonian};
pub use potential::{Circle, DoubleWell, Potential, Quadratic};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("diffusion matrix is not positive definite at q = {0:?}")]
    NotPositiveDefinite(Vec<f64>),
    #[error("point {0:?} is outside the domain of the diffusion field")]
    Domain(Vec<f64>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// A point `(q, p)` of phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(q.len(), p.len(), "q and p must have the same dimension");
        PhasePoint { q, p }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Concatenation `[q; p]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.dim());
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.p);
        v
    }

    pub fn from_flat(x: &[f64]) -> Self {
        assert!(x.len() % 2 == 0);
        let m = x.len() / 2;
        PhasePoint { q: x[..m].to_vec(), p: x[m..].to_vec() }
    }
}

/// A position with a scalar direction, the state of the GHMALA sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedPoint {
    pub q: Vec<f64>,
    pub xi: f64,
}

impl DirectedPoint {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.push(self.xi);
        v
    }

    pub fn from_flat(x: &[f64]) -> Self {
        let m = x.len() - 1;
        DirectedPoint { q: x[..m].to_vec(), xi: x[m] }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite differences used to check analytic derivatives.

    pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Jacobian of `f: R^n -> R^k`, returned as `k x n` row-major.
    pub fn fd_jacobian(f: impl Fn(&[f64], &mut [f64]), x: &[f64], k: usize, h: f64) -> Vec<f64> {
        let n = x.len();
        let mut jac = vec![0.0; k * n];
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; k];
        let mut fm = vec![0.0; k];
        for j in 0..n {
            xp[j] = x[j] + h;
            f(&xp, &mut fp);
            xp[j] = x[j] - h;
            f(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..k {
                jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + y.abs()),
                "entry {i}: {x} vs {y} (tol {tol})"
            );
        }
    }
}
