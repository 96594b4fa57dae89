use std::sync::Arc;

use super::{DiffusionField, ModelError, Potential};
use crate::linalg::{self, zeros, zeros_vec};

/// A smooth Hamiltonian on `R^m x R^m` with analytic second derivatives.
///
/// Hessian blocks are row-major `m x m`; the mixed block has entries
/// `qp[i*m + j] = ∂_{q_i} ∂_{p_j} H`.
pub trait Hamiltonian: Send + Sync {
    fn dim(&self) -> usize;
    fn energy(&self, q: &[f64], p: &[f64]) -> f64;
    fn grad_q(&self, q: &[f64], p: &[f64], out: &mut [f64]);
    fn grad_p(&self, q: &[f64], p: &[f64], out: &mut [f64]);
    fn hessian(&self, q: &[f64], p: &[f64], qq: &mut [f64], qp: &mut [f64], pp: &mut [f64]);

    fn mixed_hessian(&self, q: &[f64], p: &[f64], qp: &mut [f64]) {
        let m = self.dim();
        let (mut qq, mut pp) = (zeros(m * m), zeros(m * m));
        self.hessian(q, p, &mut qq, qp, &mut pp);
    }
}

/// `H(q, p) = V(q) - ½ ln det D(q) + ½ pᵀ D(q) p`.
#[derive(Clone)]
pub struct RmhmcHamiltonian {
    potential: Arc<dyn Potential>,
    diffusion: Arc<dyn DiffusionField>,
    constant: bool,
}

impl std::fmt::Debug for RmhmcHamiltonian {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RmhmcHamiltonian")
            .field("dim", &self.dim())
            .field("constant_diffusion", &self.constant)
            .finish()
    }
}

impl RmhmcHamiltonian {
    pub fn new(
        potential: Arc<dyn Potential>,
        diffusion: Arc<dyn DiffusionField>,
    ) -> Result<Self, ModelError> {
        if potential.dim() != diffusion.dim() {
            return Err(ModelError::Dimension {
                expected: potential.dim(),
                got: diffusion.dim(),
            });
        }
        let constant = diffusion.is_constant();
        Ok(RmhmcHamiltonian { potential, diffusion, constant })
    }

    pub fn potential(&self) -> &Arc<dyn Potential> {
        &self.potential
    }

    pub fn diffusion(&self) -> &Arc<dyn DiffusionField> {
        &self.diffusion
    }

    /// Draws `p ~ N(0, D(q)⁻¹)` from a standard normal vector `g` by solving
    /// `Lᵀ p = g` where `L Lᵀ = D(q)`.
    pub fn sample_momentum(&self, q: &[f64], g: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        let m = self.dim();
        self.diffusion.check_domain(q)?;
        let mut l = zeros(m * m);
        self.diffusion.eval(q, &mut l);
        if !linalg::cholesky(&mut l, m) {
            return Err(ModelError::NotPositiveDefinite(q.to_vec()));
        }
        out.copy_from_slice(g);
        linalg::solve_lower_transpose(&l, out);
        Ok(())
    }

    /// `ln det D(q)`, or NaN if `D(q)` is not positive definite.
    pub fn log_det(&self, q: &[f64]) -> f64 {
        let m = self.dim();
        let mut l = zeros(m * m);
        self.diffusion.eval(q, &mut l);
        if !linalg::cholesky(&mut l, m) {
            return f64::NAN;
        }
        2.0 * (0..m).map(|i| l[i * m + i].ln()).sum::<f64>()
    }

    /// `D(q)⁻¹`, filling NaN when `D(q)` is not positive definite.
    fn inverse(&self, d: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut l = zeros(m * m);
        l.copy_from_slice(d);
        if linalg::cholesky(&mut l, m) {
            linalg::cholesky_inverse(&l, m, out);
        } else {
            out.iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
}

impl Hamiltonian for RmhmcHamiltonian {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn energy(&self, q: &[f64], p: &[f64]) -> f64 {
        let m = self.dim();
        let mut d = zeros(m * m);
        self.diffusion.eval(q, &mut d);
        self.potential.value(q) - 0.5 * self.log_det(q) + 0.5 * linalg::quad_form(&d, p)
    }

    fn grad_q(&self, q: &[f64], p: &[f64], out: &mut [f64]) {
        let m = self.dim();
        self.potential.gradient(q, out);
        if self.constant {
            return;
        }
        let mut ld = zeros_vec(m);
        let mut qf = zeros_vec(m);
        self.diffusion.log_det_gradient(q, &mut ld);
        self.diffusion.quad_form_gradient(q, p, &mut qf);
        for i in 0..m {
            out[i] += 0.5 * (qf[i] - ld[i]);
        }
    }

    fn grad_p(&self, q: &[f64], p: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut d = zeros(m * m);
        self.diffusion.eval(q, &mut d);
        linalg::mat_vec(&d, p, out);
    }

    fn mixed_hessian(&self, q: &[f64], p: &[f64], qp: &mut [f64]) {
        let m = self.dim();
        let mm = m * m;
        if self.constant {
            qp.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mut dd = zeros(mm * m);
        self.diffusion.gradient(q, &mut dd);
        for i in 0..m {
            linalg::mat_vec(&dd[i * mm..(i + 1) * mm], p, &mut qp[i * m..(i + 1) * m]);
        }
    }

    fn hessian(&self, q: &[f64], p: &[f64], qq: &mut [f64], qp: &mut [f64], pp: &mut [f64]) {
        let m = self.dim();
        let mm = m * m;
        self.potential.hessian(q, qq);
        self.diffusion.eval(q, pp);
        self.mixed_hessian(q, p, qp);
        if self.constant {
            return;
        }
        let mut dinv = zeros(mm);
        let mut dd = zeros(mm * m);
        let mut ddd = zeros(mm * mm);
        self.inverse(pp, &mut dinv);
        self.diffusion.gradient(q, &mut dd);
        self.diffusion.hessian(q, &mut ddd);
        // A_i = D⁻¹ ∂_i D
        let mut a = zeros(mm * m);
        for i in 0..m {
            for r in 0..m {
                for c in 0..m {
                    a[i * mm + r * m + c] =
                        (0..m).map(|k| dinv[r * m + k] * dd[i * mm + k * m + c]).sum();
                }
            }
        }
        let mut tmp = zeros_vec(m);
        for i in 0..m {
            for j in 0..m {
                let dij = &ddd[(i * m + j) * mm..(i * m + j + 1) * mm];
                let mut tr_aa = 0.0;
                let mut tr_d2 = 0.0;
                for r in 0..m {
                    for c in 0..m {
                        tr_aa += a[j * mm + r * m + c] * a[i * mm + c * m + r];
                        tr_d2 += dinv[r * m + c] * dij[c * m + r];
                    }
                }
                linalg::mat_vec(dij, p, &mut tmp);
                qq[i * m + j] += -0.5 * (tr_d2 - tr_aa) + 0.5 * linalg::dot(p, &tmp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::*;
    use crate::model::*;
    use proptest::prelude::*;

    fn models() -> Vec<RmhmcHamiltonian> {
        vec![
            RmhmcHamiltonian::new(Arc::new(DoubleWell::default()), Arc::new(CosineSquared::default())).unwrap(),
            RmhmcHamiltonian::new(Arc::new(Quadratic::isotropic(1, 0.0)), Arc::new(OnePlusSquare)).unwrap(),
            RmhmcHamiltonian::new(Arc::new(Circle::default()), Arc::new(Anisotropic::planar(0.1))).unwrap(),
            RmhmcHamiltonian::new(Arc::new(Circle::default()), Arc::new(ConstantDiffusion::isotropic(2, 0.1))).unwrap(),
        ]
    }

    fn check(h: &RmhmcHamiltonian, x: &[f64]) {
        let m = h.dim();
        let (q, p) = x.split_at(m);
        let energy = |z: &[f64]| h.energy(&z[..m], &z[m..]);
        let fd = fd_gradient(energy, x, 1e-6);
        let mut gq = vec![0.0; m];
        let mut gp = vec![0.0; m];
        h.grad_q(q, p, &mut gq);
        h.grad_p(q, p, &mut gp);
        assert_close(&gq, &fd[..m], 1e-5);
        assert_close(&gp, &fd[m..], 1e-5);

        let grad = |z: &[f64], out: &mut [f64]| {
            h.grad_q(&z[..m], &z[m..], &mut out[..m]);
            h.grad_p(&z[..m], &z[m..], &mut out[m..]);
        };
        let fd = fd_jacobian(grad, x, 2 * m, 1e-6);
        let (mut qq, mut qp, mut pp) = (vec![0.0; m * m], vec![0.0; m * m], vec![0.0; m * m]);
        h.hessian(q, p, &mut qq, &mut qp, &mut pp);
        let n = 2 * m;
        for i in 0..m {
            for j in 0..m {
                let tol = |e: f64| 1e-4 * (1.0 + e.abs());
                let (a, e) = (qq[i * m + j], fd[i * n + j]);
                assert!((a - e).abs() < tol(e), "qq[{i}{j}] {a} vs {e}");
                let (a, e) = (qp[i * m + j], fd[i * n + m + j]);
                assert!((a - e).abs() < tol(e), "qp[{i}{j}] {a} vs {e}");
                let (a, e) = (pp[i * m + j], fd[(m + i) * n + m + j]);
                assert!((a - e).abs() < tol(e), "pp[{i}{j}] {a} vs {e}");
            }
        }
        let mut qp2 = vec![0.0; m * m];
        h.mixed_hessian(q, p, &mut qp2);
        assert_eq!(qp, qp2);
    }

    #[test]
    fn one_plus_square_reference_values() {
        // D = 1 + q², V = 0 at (1, 1): H = 1 - ½ ln 2, ∇_q H = 2q(-½/D + ½p²) = ½.
        let h = &models()[1];
        let e = h.energy(&[1.0], &[1.0]);
        assert!((e - (1.0 - 0.5 * 2f64.ln())).abs() < 1e-15);
        assert!((e - 0.653_426_4).abs() < 1e-7);
        let mut g = [0.0];
        h.grad_q(&[1.0], &[1.0], &mut g);
        assert!((g[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn momentum_draw_scales_by_cholesky() {
        let h = RmhmcHamiltonian::new(Arc::new(Quadratic::isotropic(1, 1.0)), Arc::new(ConstantDiffusion::scalar(1, 4.0))).unwrap();
        let mut p = [0.0];
        h.sample_momentum(&[0.0], &[1.0], &mut p).unwrap();
        assert_eq!(p, [0.5]);
    }

    #[test]
    fn momentum_draw_outside_domain_fails() {
        let h = &models()[2];
        let mut p = [0.0; 2];
        assert!(matches!(h.sample_momentum(&[0.0, 0.0], &[1.0, 1.0], &mut p), Err(ModelError::Domain(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let r = RmhmcHamiltonian::new(Arc::new(DoubleWell::default()), Arc::new(Anisotropic::planar(0.1)));
        assert!(matches!(r, Err(ModelError::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(a in -1.8..1.8f64, b in -1.8..1.8f64, c in -2.0..2.0f64, d in -2.0..2.0f64) {
            let ms = models();
            check(&ms[0], &[a, c]);
            check(&ms[1], &[a, c]);
            prop_assume!(a.abs() + b.abs() > 0.2);
            check(&ms[2], &[a, b, c, d]);
            check(&ms[3], &[a, b, c, d]);
        }

        #[test]
        fn energy_is_even_in_momentum(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, d in -2.0..2.0f64) {
            for h in models() {
                let m = h.dim();
                let q = &[a, b][..m];
                let p = &[c, d][..m];
                let np: Vec<f64> = p.iter().map(|v| -v).collect();
                prop_assert_eq!(h.energy(q, p), h.energy(q, &np));
            }
        }

        #[test]
        fn momentum_draw_has_right_precision(a in -2.0..2.0f64, b in -2.0..2.0f64, g0 in -2.0..2.0f64, g1 in -2.0..2.0f64) {
            // pᵀ D p = |g|² when Lᵀ p = g.
            let h = &models()[2];
            prop_assume!(a.abs() + b.abs() > 1e-3);
            let mut p = [0.0; 2];
            h.sample_momentum(&[a, b], &[g0, g1], &mut p).unwrap();
            let mut d = [0.0; 4];
            h.diffusion().eval(&[a, b], &mut d);
            prop_assert!((linalg::quad_form(&d, &p) - (g0 * g0 + g1 * g1)).abs() < 1e-9 * (1.0 + g0 * g0 + g1 * g1));
        }
    }
}
