//! Nonlinear solvers for the scheme residuals.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, zeros, zeros_vec};
use crate::model::Hamiltonian;
use crate::schemes::Scheme;

/// Floor for relative tolerances at the origin.
pub const SCALE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative residual tolerance `η`.
    #[serde(rename = "eta_newton")]
    pub eta: f64,
    /// Relative step tolerance `η̃`.
    #[serde(rename = "eta_newton_tilde")]
    pub eta_step: f64,
    #[serde(rename = "n_newton")]
    pub max_newton_iter: usize,
    /// Singular values at or below `rank_rel * σ_max` count as zero. Defaults
    /// to `n ε` for an `n x n` Jacobian.
    #[serde(rename = "rank_rel_threshold", skip_serializing_if = "Option::is_none")]
    pub rank_rel: Option<f64>,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    /// Converged solutions must satisfy `|Φ| < cert_tol * max(1, |x|)`.
    pub cert_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eta: 1e-12,
            eta_step: 1e-12,
            max_newton_iter: 100,
            rank_rel: None,
            fp_tol: 1e-13,
            fp_max_iter: 500,
            cert_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// The Jacobian failed the numerical rank test.
    JacobianSingular,
    MaxIterations,
    /// A non-finite iterate, or an iterate that met the stopping rule but
    /// failed the residual certificate.
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Last iterate of the chain `(y_1, ..., y_k)`; the solution when converged.
    pub chain: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn solution(&self) -> Option<&[f64]> {
        self.converged().then_some(&self.chain[..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverBackend {
    /// Newton on the full stacked chain.
    Newton,
    /// Newton one block at a time, when the scheme allows it; otherwise the
    /// same as `Newton`.
    NewtonSequential,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solver {
    pub backend: SolverBackend,
    pub config: SolverConfig,
}

impl Solver {
    pub fn new(backend: SolverBackend, config: SolverConfig) -> Self {
        Solver { backend, config }
    }

    pub fn solve<S: Scheme + ?Sized>(&self, scheme: &S, x: &[f64]) -> SolveResult {
        match self.backend {
            SolverBackend::Newton => newton_solve(scheme, x, None, &self.config),
            SolverBackend::NewtonSequential => scheme
                .solve_blockwise(x, &self.config)
                .unwrap_or_else(|| newton_solve(scheme, x, None, &self.config)),
            SolverBackend::FixedPoint => fixed_point_solve(scheme, x, &self.config),
        }
    }
}

/// Newton iteration on `F(y) = 0` with the stopping rules
/// `|F(y⁺)| < η |F(y⁰)|` or `|y⁺ - y| < η̃ max(|y|, floor)`.
///
/// Before each update the Jacobian must have full numerical rank.
pub fn newton(
    y0: &[f64],
    cfg: &SolverConfig,
    cert_scale: f64,
    mut residual: impl FnMut(&[f64], &mut [f64]),
    mut jacobian: impl FnMut(&[f64], &mut [f64]),
) -> SolveResult {
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut r = zeros_vec(n);
    let mut r_new = zeros_vec(n);
    let mut jac = zeros(n * n);
    let mut y_new = zeros_vec(n);

    residual(&y, &mut r);
    let r0 = linalg::norm(&r);
    if !r0.is_finite() {
        return SolveResult { status: SolveStatus::Diverged, chain: y, iterations: 0, residual_norm: r0 };
    }
    let mut r_norm = r0;
    for it in 1..=cfg.max_newton_iter {
        jacobian(&y, &mut jac);
        if !linalg::all_finite(&jac) {
            return SolveResult { status: SolveStatus::Diverged, chain: y, iterations: it - 1, residual_norm: r_norm };
        }
        if linalg::numerical_rank(&jac, n, cfg.rank_rel) < n {
            return SolveResult {
                status: SolveStatus::JacobianSingular,
                chain: y,
                iterations: it - 1,
                residual_norm: r_norm,
            };
        }
        let mut delta = r.clone();
        if !linalg::lu_solve(&mut jac, &mut delta) {
            return SolveResult {
                status: SolveStatus::JacobianSingular,
                chain: y,
                iterations: it - 1,
                residual_norm: r_norm,
            };
        }
        for i in 0..n {
            y_new[i] = y[i] - delta[i];
        }
        if !linalg::all_finite(&y_new) {
            return SolveResult { status: SolveStatus::Diverged, chain: y, iterations: it, residual_norm: r_norm };
        }
        residual(&y_new, &mut r_new);
        let new_norm = linalg::norm(&r_new);
        if !new_norm.is_finite() {
            y.copy_from_slice(&y_new);
            return SolveResult { status: SolveStatus::Diverged, chain: y, iterations: it, residual_norm: new_norm };
        }
        let res_ok = if r0 == 0.0 { new_norm == 0.0 } else { new_norm < cfg.eta * r0 };
        let step_ok =
            linalg::norm(&delta) < cfg.eta_step * linalg::norm(&y).max(SCALE_FLOOR);
        y.copy_from_slice(&y_new);
        r.copy_from_slice(&r_new);
        r_norm = new_norm;
        if res_ok || step_ok {
            let status = if r_norm < cfg.cert_tol * cert_scale.max(1.0) {
                SolveStatus::Converged
            } else {
                SolveStatus::Diverged
            };
            return SolveResult { status, chain: y, iterations: it, residual_norm: r_norm };
        }
    }
    SolveResult { status: SolveStatus::MaxIterations, chain: y, iterations: cfg.max_newton_iter, residual_norm: r_norm }
}

/// Newton on the full chain `Φ(x, ·) = 0`, started from `y0` or the scheme's
/// explicit predictor.
pub fn newton_solve<S: Scheme + ?Sized>(
    scheme: &S,
    x: &[f64],
    y0: Option<&[f64]>,
    cfg: &SolverConfig,
) -> SolveResult {
    let start = match y0 {
        Some(y) => y.to_vec(),
        None => {
            let mut y = vec![0.0; scheme.chain_dim()];
            scheme.predict(x, &mut y);
            y
        }
    };
    newton(
        &start,
        cfg,
        linalg::norm(x),
        |y, out| scheme.residual(x, y, out),
        |y, out| scheme.jac_y(x, y, out),
    )
}

/// Picard iteration `y <- G(x, y)` from `y⁰ = (x, ..., x)`, stopping when
/// `|Δy| < fp_tol max(|y|, floor)`.
pub fn fixed_point_solve<S: Scheme + ?Sized>(scheme: &S, x: &[f64], cfg: &SolverConfig) -> SolveResult {
    let k = scheme.chain_len();
    let n = scheme.chain_dim();
    let mut y: Vec<f64> = x.iter().cycle().take(n).cloned().collect();
    debug_assert_eq!(y.len(), x.len() * k);
    let mut next = vec![0.0; n];
    let mut r = vec![0.0; n];
    for it in 1..=cfg.fp_max_iter {
        scheme.fixed_point_sweep(x, &y, &mut next);
        if !linalg::all_finite(&next) {
            scheme.residual(x, &y, &mut r);
            return SolveResult { status: SolveStatus::Diverged, chain: y, iterations: it, residual_norm: linalg::norm(&r) };
        }
        let step = linalg::dist(&next, &y);
        let done = step < cfg.fp_tol * linalg::norm(&y).max(SCALE_FLOOR);
        std::mem::swap(&mut y, &mut next);
        if done {
            scheme.residual(x, &y, &mut r);
            let rn = linalg::norm(&r);
            let status = if rn < cfg.cert_tol * linalg::norm(x).max(1.0) {
                SolveStatus::Converged
            } else {
                SolveStatus::Diverged
            };
            return SolveResult { status, chain: y, iterations: it, residual_norm: rn };
        }
    }
    scheme.residual(x, &y, &mut r);
    SolveResult { status: SolveStatus::MaxIterations, chain: y, iterations: cfg.fp_max_iter, residual_norm: linalg::norm(&r) }
}

/// Generalized Störmer–Verlet solved block by block: Newton for the
/// intermediate momentum `p̃ = p - h ∇_q H(q, p̃)`, then Newton for the
/// final position `q2 = q1 + h ∇_p H(q2, p̃)` with `h = Δt/2`. The two
/// remaining components are explicit.
pub fn gsv_sequential<H: Hamiltonian + ?Sized>(ham: &H, dt: f64, x: &[f64], cfg: &SolverConfig) -> SolveResult {
    let m = ham.dim();
    let h = 0.5 * dt;
    let (q, p) = x.split_at(m);
    let scale = linalg::norm(x);
    let mut chain = vec![0.0; 4 * m];
    let mut g = zeros_vec(m);
    let mut qp = zeros(m * m);

    // Block 1: p̃, started from the explicit Euler momentum.
    ham.grad_q(q, p, &mut g);
    let start: Vec<f64> = (0..m).map(|i| p[i] - h * g[i]).collect();
    let first = newton(
        &start,
        cfg,
        scale,
        |pt, out| {
            ham.grad_q(q, pt, out);
            for i in 0..m {
                out[i] = pt[i] - p[i] + h * out[i];
            }
        },
        |pt, out| {
            ham.mixed_hessian(q, pt, &mut qp);
            for i in 0..m {
                for j in 0..m {
                    out[i * m + j] = if i == j { 1.0 } else { 0.0 } + h * qp[i * m + j];
                }
            }
        },
    );
    let pt = &first.chain;
    ham.grad_p(q, pt, &mut g);
    for i in 0..m {
        chain[i] = q[i] + h * g[i];
        chain[m + i] = pt[i];
    }
    if !first.converged() {
        return SolveResult { status: first.status, chain, iterations: first.iterations, residual_norm: first.residual_norm };
    }

    // Block 2: q2, started from the explicit Euler position.
    let (y1, y2) = chain.split_at_mut(2 * m);
    let (q1, pt) = y1.split_at(m);
    ham.grad_p(q1, pt, &mut g);
    let start: Vec<f64> = (0..m).map(|i| q1[i] + h * g[i]).collect();
    let second = newton(
        &start,
        cfg,
        scale,
        |q2, out| {
            ham.grad_p(q2, pt, out);
            for i in 0..m {
                out[i] = q2[i] - q1[i] - h * out[i];
            }
        },
        |q2, out| {
            ham.mixed_hessian(q2, pt, &mut qp);
            for i in 0..m {
                for j in 0..m {
                    out[i * m + j] = if i == j { 1.0 } else { 0.0 } - h * qp[j * m + i];
                }
            }
        },
    );
    let q2 = &second.chain;
    ham.grad_q(q2, pt, &mut g);
    for i in 0..m {
        y2[i] = q2[i];
        y2[m + i] = pt[i] - h * g[i];
    }
    let iterations = first.iterations + second.iterations;
    if !second.converged() {
        return SolveResult { status: second.status, chain, iterations, residual_norm: second.residual_norm };
    }
    SolveResult { status: SolveStatus::Converged, chain, iterations, residual_norm: second.residual_norm.max(first.residual_norm) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use crate::schemes::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn oscillator(scale: f64) -> RmhmcHamiltonian {
        RmhmcHamiltonian::new(Arc::new(Quadratic::isotropic(1, scale)), Arc::new(ConstantDiffusion::scalar(1, scale))).unwrap()
    }

    fn double_well() -> RmhmcHamiltonian {
        RmhmcHamiltonian::new(Arc::new(DoubleWell::default()), Arc::new(CosineSquared::default())).unwrap()
    }

    fn ring() -> RmhmcHamiltonian {
        RmhmcHamiltonian::new(Arc::new(Circle::default()), Arc::new(Anisotropic::planar(0.1))).unwrap()
    }

    fn full_residual<S: Scheme>(s: &S, x: &[f64], y: &[f64]) -> f64 {
        let mut r = vec![0.0; s.chain_dim()];
        s.residual(x, y, &mut r);
        linalg::norm(&r)
    }

    #[test]
    fn imr_oscillator_step() {
        let s = Imr::new(oscillator(1.0), 0.1);
        let res = newton_solve(&s, &[0.0, 1.0], None, &SolverConfig::default());
        assert!(res.converged());
        assert!((res.chain[0] - 0.1 / 1.0025).abs() < 1e-15);
        assert!((res.chain[1] - (1.0 - 0.005 / 1.0025)).abs() < 1e-15);
        assert!((res.chain[0] - 0.099_750_6).abs() < 1e-7);
        assert!((res.chain[1] - 0.995_012_5).abs() < 1e-7);
        // Linear residual: one Newton step is exact.
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn critical_point_is_immediate() {
        let s = Imr::new(oscillator(1.0), 0.1);
        let res = newton_solve(&s, &[0.0, 0.0], None, &SolverConfig::default());
        assert_eq!(res.status, SolveStatus::Converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.residual_norm, 0.0);
        assert_eq!(res.chain, vec![0.0, 0.0]);
        let fp = fixed_point_solve(&s, &[0.0, 0.0], &SolverConfig::default());
        assert_eq!(fp.status, SolveStatus::Converged);
        assert_eq!(fp.iterations, 1);
    }

    #[test]
    fn gsv_sequential_on_separable_oscillator() {
        let res = gsv_sequential(&oscillator(1.0), 0.1, &[0.0, 1.0], &SolverConfig::default());
        assert!(res.converged());
        assert_eq!(res.iterations, 2, "one iteration per block");
        let expect = [0.05, 1.0, 0.1, 0.995];
        for (a, b) in res.chain.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{:?}", res.chain);
        }
    }

    #[test]
    fn quadratic_momentum_equation_picks_small_root() {
        // D = 1 + q², V = q²/2, q = 1, p = 1, Δt = 0.1: the momentum block
        // 0.05 p̃² + p̃ - 0.975 = 0 has roots 0.931606 and -20.93, and the
        // explicit predictor 0.925 lies in the basin of the first.
        let ham = RmhmcHamiltonian::new(Arc::new(Quadratic::isotropic(1, 1.0)), Arc::new(OnePlusSquare)).unwrap();
        let res = gsv_sequential(&ham, 0.1, &[1.0, 1.0], &SolverConfig::default());
        assert!(res.converged());
        let root = (-1.0 + (1.0_f64 + 4.0 * 0.05 * 0.975).sqrt()) / 0.1;
        assert!((res.chain[1] - root).abs() < 1e-14);
        assert!((res.chain[1] - 0.931_606).abs() < 1e-6);
    }

    #[test]
    fn singular_jacobian_is_reported() {
        // y³ = 1 started at y = 0, where the derivative vanishes.
        let res = newton(
            &[0.0],
            &SolverConfig::default(),
            1.0,
            |y, out| out[0] = y[0] * y[0] * y[0] - 1.0,
            |y, out| out[0] = 3.0 * y[0] * y[0],
        );
        assert_eq!(res.status, SolveStatus::JacobianSingular);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn divergent_picard_hits_iteration_cap() {
        // IMR on H = λ(q² + p²)/2 with λΔt/2 = 1.2: the Picard map expands.
        let s = Imr::new(oscillator(2.4), 1.0);
        let res = fixed_point_solve(&s, &[0.3, 1.0], &SolverConfig::default());
        assert_eq!(res.status, SolveStatus::MaxIterations);
        // Newton solves the same linear system in one step.
        assert!(newton_solve(&s, &[0.3, 1.0], None, &SolverConfig::default()).converged());
    }

    #[test]
    fn nonfinite_iterates_diverge() {
        let res = newton(
            &[1.0],
            &SolverConfig::default(),
            1.0,
            |y, out| out[0] = y[0].exp() - 1e300,
            |y, out| out[0] = y[0].exp(),
        );
        assert_eq!(res.status, SolveStatus::Diverged);
    }

    #[test]
    fn solver_dispatch() {
        let s = Gsv::new(double_well(), 0.2);
        let x = [0.3, -1.1];
        let cfg = SolverConfig::default();
        let a = Solver::new(SolverBackend::Newton, cfg).solve(&s, &x);
        let b = Solver::new(SolverBackend::NewtonSequential, cfg).solve(&s, &x);
        let c = Solver::new(SolverBackend::FixedPoint, cfg).solve(&s, &x);
        for r in [&a, &b, &c] {
            assert!(r.converged());
            assert!(linalg::dist(&r.chain, &a.chain) < 1e-10);
        }
        // Sequential falls back to the full solve for schemes without blocks.
        let imr = Imr::new(double_well(), 0.2);
        let d = Solver::new(SolverBackend::NewtonSequential, cfg).solve(&imr, &x);
        assert_eq!(d, newton_solve(&imr, &x, None, &cfg));
    }

    proptest! {
        #[test]
        fn backends_agree(q in -1.8..1.8f64, p in -3.0..3.0f64) {
            let cfg = SolverConfig::default();
            let dw = double_well();
            let x = [q, p];
            let g = Gsv::new(dw.clone(), 0.05);
            let full = newton_solve(&g, &x, None, &cfg);
            let seq = gsv_sequential(&dw, 0.05, &x, &cfg);
            let fp = fixed_point_solve(&g, &x, &cfg);
            prop_assert!(full.converged() && seq.converged() && fp.converged());
            prop_assert!(linalg::dist(&full.chain, &seq.chain) < 1e-8);
            prop_assert!(linalg::dist(&full.chain, &fp.chain) < 1e-8);
            prop_assert!(full_residual(&g, &x, &seq.chain) < 1e-10);

            let imr = Imr::new(dw, 0.05);
            let a = newton_solve(&imr, &x, None, &cfg);
            let b = fixed_point_solve(&imr, &x, &cfg);
            prop_assert!(a.converged() && b.converged());
            prop_assert!(linalg::dist(&a.chain, &b.chain) < 1e-8);
        }

        #[test]
        fn converged_results_certify(a in -1.5..1.5f64, b in -1.5..1.5f64, c in -2.0..2.0f64, d in -2.0..2.0f64, dt in 0.01..0.3f64) {
            prop_assume!(a.abs() + b.abs() > 0.3);
            let cfg = SolverConfig::default();
            let x = [a, b, c, d];
            let g = Gsv::new(ring(), dt);
            for res in [newton_solve(&g, &x, None, &cfg), gsv_sequential(&ring(), dt, &x, &cfg), fixed_point_solve(&g, &x, &cfg)] {
                if res.converged() {
                    prop_assert!(full_residual(&g, &x, &res.chain) < 1e-8 * linalg::norm(&x).max(1.0));
                }
            }
        }
    }
}
