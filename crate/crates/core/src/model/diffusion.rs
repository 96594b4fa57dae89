use std::f64::consts::PI;

use super::ModelError;
use crate::linalg::{self, zeros};

/// A symmetric positive definite matrix field `D(q)`.
///
/// Derivative layouts, all row-major with `m = dim()`:
/// * `gradient`: `out[(k*m + i)*m + j] = ∂_k D_ij`
/// * `hessian`: `out[((k*m + l)*m + i)*m + j] = ∂_k ∂_l D_ij`
pub trait DiffusionField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, q: &[f64], out: &mut [f64]);
    fn gradient(&self, q: &[f64], out: &mut [f64]);
    fn hessian(&self, q: &[f64], out: &mut [f64]);

    /// Errors for points where the field is undefined.
    fn check_domain(&self, _q: &[f64]) -> Result<(), ModelError> {
        Ok(())
    }

    fn is_constant(&self) -> bool {
        false
    }

    /// True if `D(q)` is diagonal everywhere.
    fn is_diagonal(&self) -> bool {
        false
    }

    /// `∂_k ln det D = Tr(D⁻¹ ∂_k D)`.
    fn log_det_gradient(&self, q: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mm = m * m;
        let mut l = zeros(mm);
        let mut dinv = zeros(mm);
        let mut dd = zeros(mm * m);
        self.eval(q, &mut l);
        if !linalg::cholesky(&mut l, m) {
            out.iter_mut().for_each(|v| *v = f64::NAN);
            return;
        }
        linalg::cholesky_inverse(&l, m, &mut dinv);
        self.gradient(q, &mut dd);
        for k in 0..m {
            let dk = &dd[k * mm..(k + 1) * mm];
            out[k] = (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).map(|(a, b)| dinv[a * m + b] * dk[b * m + a]).sum();
        }
    }

    /// `pᵀ ∂_k D p`.
    fn quad_form_gradient(&self, q: &[f64], p: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mm = m * m;
        let mut dd = zeros(mm * m);
        self.gradient(q, &mut dd);
        for k in 0..m {
            out[k] = linalg::quad_form(&dd[k * mm..(k + 1) * mm], p);
        }
    }

    /// `(div D)_i = Σ_j ∂_j D_ij`.
    fn divergence(&self, q: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut g = vec![0.0; m * m * m];
        self.gradient(q, &mut g);
        for i in 0..m {
            out[i] = (0..m).map(|j| g[(j * m + i) * m + j]).sum();
        }
    }
}

/// A constant SPD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantDiffusion {
    dim: usize,
    d: Vec<f64>,
}

impl ConstantDiffusion {
    pub fn new(dim: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), dim * dim);
        ConstantDiffusion { dim, d }
    }

    pub fn scalar(dim: usize, s: f64) -> Self {
        Self::diagonal(&vec![s; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let m = diag.len();
        let mut d = vec![0.0; m * m];
        for i in 0..m {
            d[i * m + i] = diag[i];
        }
        ConstantDiffusion { dim: m, d }
    }

    /// The isotropic field `(1 + ε) I`.
    pub fn isotropic(dim: usize, eps: f64) -> Self {
        Self::scalar(dim, 1.0 + eps)
    }
}

impl DiffusionField for ConstantDiffusion {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _q: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.d);
    }

    fn gradient(&self, _q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn hessian(&self, _q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn is_constant(&self) -> bool {
        true
    }

    fn is_diagonal(&self) -> bool {
        let m = self.dim;
        (0..m).all(|i| (0..m).all(|j| i == j || self.d[i * m + j] == 0.0))
    }
}

/// One-dimensional `D(q) = 1 + q²`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OnePlusSquare;

impl DiffusionField for OnePlusSquare {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, q: &[f64], out: &mut [f64]) {
        out[0] = 1.0 + q[0] * q[0];
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * q[0];
    }

    fn hessian(&self, _q: &[f64], out: &mut [f64]) {
        out[0] = 2.0;
    }

    fn is_diagonal(&self) -> bool {
        true
    }
}

/// One-dimensional `D(q) = ((a + cos πq) / 2)²`, positive for `a > 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSquared {
    pub offset: f64,
}

impl Default for CosineSquared {
    fn default() -> Self {
        CosineSquared { offset: 1.5 }
    }
}

impl DiffusionField for CosineSquared {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, q: &[f64], out: &mut [f64]) {
        let f = 0.5 * (self.offset + (PI * q[0]).cos());
        out[0] = f * f;
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        let f = 0.5 * (self.offset + (PI * q[0]).cos());
        let df = -0.5 * PI * (PI * q[0]).sin();
        out[0] = 2.0 * f * df;
    }

    fn hessian(&self, q: &[f64], out: &mut [f64]) {
        let f = 0.5 * (self.offset + (PI * q[0]).cos());
        let df = -0.5 * PI * (PI * q[0]).sin();
        let ddf = -0.5 * PI * PI * (PI * q[0]).cos();
        out[0] = 2.0 * (df * df + f * ddf);
    }

    fn is_diagonal(&self) -> bool {
        true
    }
}

/// `ε I + (I - n nᵀ)` with `n = q / |q|`. In the plane this is `ε I + t tᵀ`
/// for the unit tangent `t = (-y, x) / |q|`, so diffusion is strong along
/// circles centered at the origin and weak across them. Undefined at `q = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anisotropic {
    pub dim: usize,
    pub eps: f64,
}

impl Anisotropic {
    pub fn planar(eps: f64) -> Self {
        Anisotropic { dim: 2, eps }
    }
}

impl DiffusionField for Anisotropic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn check_domain(&self, q: &[f64]) -> Result<(), ModelError> {
        if q.iter().all(|&x| x == 0.0) {
            Err(ModelError::Domain(q.to_vec()))
        } else {
            Ok(())
        }
    }

    fn eval(&self, q: &[f64], out: &mut [f64]) {
        let m = self.dim;
        let r2 = crate::linalg::dot(q, q);
        for i in 0..m {
            for j in 0..m {
                let id = if i == j { 1.0 + self.eps } else { 0.0 };
                out[i * m + j] = id - q[i] * q[j] / r2;
            }
        }
    }

    fn log_det_gradient(&self, _q: &[f64], out: &mut [f64]) {
        // det D = ε (1 + ε)^(m-1) everywhere
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn quad_form_gradient(&self, q: &[f64], p: &[f64], out: &mut [f64]) {
        let r2 = linalg::dot(q, q);
        let qp = linalg::dot(q, p);
        for k in 0..self.dim {
            out[k] = -2.0 * qp * (p[k] - qp * q[k] / r2) / r2;
        }
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        let m = self.dim;
        let r2 = crate::linalg::dot(q, q);
        let r4 = r2 * r2;
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for k in 0..m {
            for i in 0..m {
                for j in 0..m {
                    let dn = (d(i, k) * q[j] + q[i] * d(j, k)) / r2 - 2.0 * q[i] * q[j] * q[k] / r4;
                    out[(k * m + i) * m + j] = -dn;
                }
            }
        }
    }

    fn hessian(&self, q: &[f64], out: &mut [f64]) {
        let m = self.dim;
        let r2 = crate::linalg::dot(q, q);
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for k in 0..m {
            for l in 0..m {
                for i in 0..m {
                    for j in 0..m {
                        let t1 = (d(i, k) * d(j, l) + d(i, l) * d(j, k)) / r2;
                        let t2 = -2.0 * (d(i, k) * q[j] + q[i] * d(j, k)) * q[l] / r4;
                        let t3 = -2.0
                            * (d(i, l) * q[j] * q[k] + q[i] * d(j, l) * q[k] + q[i] * q[j] * d(k, l))
                            / r4;
                        let t4 = 8.0 * q[i] * q[j] * q[k] * q[l] / r6;
                        out[((k * m + l) * m + i) * m + j] = -(t1 + t2 + t3 + t4);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::*;
    use proptest::prelude::*;

    fn check_derivatives(f: &dyn DiffusionField, q: &[f64]) {
        let m = f.dim();
        let mm = m * m;
        let mut g = vec![0.0; mm * m];
        f.gradient(q, &mut g);
        // fd_jacobian gives (entry, k); the field layout is (k, entry).
        let fd = fd_jacobian(|x, out| f.eval(x, out), q, mm, 1e-6);
        for k in 0..m {
            for e in 0..mm {
                let a = g[k * mm + e];
                let b = fd[e * m + k];
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "∂_{k} D[{e}]: {a} vs {b}");
            }
        }
        let mut h = vec![0.0; mm * mm];
        f.hessian(q, &mut h);
        let fd = fd_jacobian(|x, out| f.gradient(x, out), q, mm * m, 1e-6);
        for k in 0..m {
            for l in 0..m {
                for e in 0..mm {
                    let a = h[(k * m + l) * mm + e];
                    let b = fd[(k * mm + e) * m + l];
                    assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "∂_{k}∂_{l} D[{e}]: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn anisotropic_on_axis() {
        let d = Anisotropic::planar(0.1);
        let mut out = [0.0; 4];
        d.eval(&[1.0, 0.0], &mut out);
        assert_close(&out, &[0.1, 0.0, 0.0, 1.1], 1e-15);
        assert!(d.check_domain(&[0.0, 0.0]).is_err());
        assert!(d.check_domain(&[0.0, 1e-300]).is_ok());
    }

    #[test]
    fn anisotropic_matches_tangent_form() {
        let d = Anisotropic::planar(0.1);
        let q = [0.3_f64, -1.2];
        let r = (q[0] * q[0] + q[1] * q[1]).sqrt();
        let t = [-q[1] / r, q[0] / r];
        let mut out = [0.0; 4];
        d.eval(&q, &mut out);
        let expect = [0.1 + t[0] * t[0], t[0] * t[1], t[1] * t[0], 0.1 + t[1] * t[1]];
        assert_close(&out, &expect, 1e-14);
    }

    #[test]
    fn divergence_of_one_plus_square() {
        let mut out = [0.0];
        OnePlusSquare.divergence(&[0.5], &mut out);
        assert_eq!(out[0], 1.0);
    }

    /// Forwards the raw derivatives only, so the generic trait methods run.
    struct Generic<'a>(&'a dyn DiffusionField);

    impl DiffusionField for Generic<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn eval(&self, q: &[f64], out: &mut [f64]) {
            self.0.eval(q, out)
        }
        fn gradient(&self, q: &[f64], out: &mut [f64]) {
            self.0.gradient(q, out)
        }
        fn hessian(&self, q: &[f64], out: &mut [f64]) {
            self.0.hessian(q, out)
        }
    }

    #[test]
    fn anisotropic_shortcuts_match_generic_formulas() {
        let f = Anisotropic::planar(0.1);
        let (q, p) = ([0.7, -1.3], [0.4, 2.1]);
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        Generic(&f).log_det_gradient(&q, &mut a);
        f.log_det_gradient(&q, &mut b);
        assert_close(&b, &a, 1e-14);
        Generic(&f).quad_form_gradient(&q, &p, &mut a);
        f.quad_form_gradient(&q, &p, &mut b);
        assert_close(&b, &a, 1e-14);
    }

    proptest! {
        #[test]
        fn cosine_derivatives(q in -2.0..2.0f64) {
            check_derivatives(&CosineSquared::default(), &[q]);
        }

        #[test]
        fn cosine_is_even_and_positive(q in -3.0..3.0f64) {
            let f = CosineSquared::default();
            let (mut a, mut b) = ([0.0], [0.0]);
            f.eval(&[q], &mut a);
            f.eval(&[-q], &mut b);
            prop_assert_eq!(a, b);
            prop_assert!(a[0] >= 1.0 / 16.0 - 1e-15);
        }

        #[test]
        fn one_plus_square_derivatives(q in -2.0..2.0f64) {
            check_derivatives(&OnePlusSquare, &[q]);
        }

        #[test]
        fn anisotropic_derivatives(x in 0.2..1.5f64, y in -1.5..1.5f64, flip in any::<bool>()) {
            let x = if flip { -x } else { x };
            check_derivatives(&Anisotropic::planar(0.1), &[x, y]);
            check_derivatives(&Anisotropic { dim: 3, eps: 0.1 }, &[x, y, 0.4]);
        }

        #[test]
        fn anisotropic_is_spd(x in -2.0..2.0f64, y in -2.0..2.0f64) {
            prop_assume!(x != 0.0 || y != 0.0);
            let mut out = [0.0; 4];
            Anisotropic::planar(0.1).eval(&[x, y], &mut out);
            prop_assert!(crate::linalg::cholesky(&mut out, 2));
        }

        #[test]
        fn anisotropic_divergence_matches_fd(x in 0.3..1.5f64, y in -1.5..1.5f64) {
            let f = Anisotropic::planar(0.1);
            let mut div = [0.0; 2];
            f.divergence(&[x, y], &mut div);
            // (div D)_i = Σ_j ∂_j D_ij by differencing each column entry.
            let h = 1e-6;
            let mut expect = [0.0; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut qp = [x, y];
                    let mut qm = [x, y];
                    qp[j] += h;
                    qm[j] -= h;
                    let (mut dp, mut dm) = ([0.0; 4], [0.0; 4]);
                    f.eval(&qp, &mut dp);
                    f.eval(&qm, &mut dm);
                    expect[i] += (dp[i * 2 + j] - dm[i * 2 + j]) / (2.0 * h);
                }
            }
            assert_close(&div, &expect, 1e-6);
        }
    }
}
