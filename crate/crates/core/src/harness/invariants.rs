//! Numerical invariants of the integrators and the checked flow.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{ExperimentConfig, SchemeKind};
use super::experiments::{build_scheme, substream};
use crate::error::Result;
use crate::linalg;
use crate::model::{ConstantDiffusion, Hamiltonian, OnePlusSquare, Quadratic, RmhmcHamiltonian};
use crate::revflow::{RevConfig, ReversibleFlow};
use crate::samplers::ChainRng;
use crate::schemes::{Gsv, Involution, Scheme};
use crate::solvers::{Solver, SolverBackend};

pub const SYMPLECTIC_TOL: f64 = 1e-6;
pub const INVOLUTION_FACTOR: f64 = 10.0;
pub const DEGENERACY_TOL: f64 = 1e-12;
pub const AGREEMENT_TOL: f64 = 1e-8;
pub const ROOT_TOL: f64 = 1e-10;
pub const ROOT_INSTANCES: usize = 1000;

const BACKENDS: [SolverBackend; 3] = [SolverBackend::Newton, SolverBackend::NewtonSequential, SolverBackend::FixedPoint];

/// One row of the invariant table. `subject` names the scheme and, where
/// relevant, the solver backend.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantRow {
    pub check: &'static str,
    pub subject: String,
    pub dt: f64,
    /// Points at which the invariant was evaluated.
    pub n_points: usize,
    /// Points skipped because a precondition did not hold (e.g. a solve
    /// failed where the check needs a solution).
    pub excluded: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub failures: usize,
}

impl InvariantRow {
    pub fn pass(&self) -> bool {
        self.failures == 0 && self.n_points > 0
    }
}

pub fn backend_name(b: SolverBackend) -> &'static str {
    match b {
        SolverBackend::Newton => "newton",
        SolverBackend::NewtonSequential => "newton_sequential",
        SolverBackend::FixedPoint => "fixed_point",
    }
}

fn scheme_name(s: SchemeKind) -> &'static str {
    match s {
        SchemeKind::Gsv => "gsv",
        SchemeKind::Imr => "imr",
    }
}

/// `q` uniform on the cube of half-width `q_range`, `p ~ N(0, D(q)⁻¹)`.
fn random_point(model: &RmhmcHamiltonian, q_range: f64, rng: &mut ChainRng) -> Result<Vec<f64>> {
    let m = model.dim();
    let mut x = vec![0.0; 2 * m];
    for v in &mut x[..m] {
        *v = rng.random_range(-q_range..q_range);
    }
    let g: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let (q, p) = x.split_at_mut(m);
    model.sample_momentum(q, &g, p)?;
    Ok(x)
}

fn rev_config(scheme: SchemeKind, cfg: &ExperimentConfig) -> RevConfig {
    cfg.rev.resolve(scheme)
}

/// Runs every invariant check.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<InvariantRow>> {
    let mut rows = Vec::new();
    rows.extend(symplecticity(cfg)?);
    rows.extend(involution(cfg)?);
    rows.push(degeneracy(cfg)?);
    rows.push(energy_drift(cfg)?);
    rows.extend(solver_agreement(cfg)?);
    rows.push(quadratic_root(cfg)?);
    Ok(rows)
}

/// Last state of the chain solved from `x`, or `None` if the solve fails.
fn step_map<S: Scheme + ?Sized>(scheme: &S, solver: &Solver, x: &[f64]) -> Option<Vec<f64>> {
    let d = scheme.state_dim();
    let res = solver.solve(scheme, x);
    let chain = res.solution()?;
    Some(chain[chain.len() - d..].to_vec())
}

/// Fourth-order central-difference Jacobian of the step map, `d x d`
/// row-major, or `None` if any perturbed solve fails.
fn fd_step_jacobian<S: Scheme + ?Sized>(scheme: &S, solver: &Solver, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let d = x.len();
    let mut jac = vec![0.0; d * d];
    let mut xp = x.to_vec();
    for j in 0..d {
        let mut eval = |off: f64| {
            xp[j] = x[j] + off;
            step_map(scheme, solver, &xp)
        };
        let (p2, p1, m1, m2) = (eval(2.0 * h)?, eval(h)?, eval(-h)?, eval(-2.0 * h)?);
        xp[j] = x[j];
        for i in 0..d {
            jac[i * d + j] = (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h);
        }
    }
    Some(jac)
}

/// `|det ∇φ - 1|` at random points whose checked flow is accepted.
pub fn symplecticity(cfg: &ExperimentConfig) -> Result<Vec<InvariantRow>> {
    let inv = &cfg.invariants;
    let model = cfg.model.build()?;
    let solver = cfg.solver.solver();
    let mut rows = Vec::new();
    for (si, scheme_kind) in [SchemeKind::Imr, SchemeKind::Gsv].into_iter().enumerate() {
        for (di, &dt) in inv.symplectic_dts.iter().enumerate() {
            let flow = ReversibleFlow::new(
                build_scheme(scheme_kind, &model, dt),
                Involution::momentum_reversal(model.dim()),
                solver,
                rev_config(scheme_kind, cfg),
            )?;
            let mut rng = substream(cfg.seed, 100 + si, di);
            let mut row = InvariantRow {
                check: "symplecticity",
                subject: scheme_name(scheme_kind).to_owned(),
                dt,
                n_points: 0,
                excluded: 0,
                max_error: 0.0,
                tolerance: SYMPLECTIC_TOL,
                failures: 0,
            };
            let max_attempts = 100 * inv.symplectic_points.max(1);
            let mut attempts = 0;
            while row.n_points < inv.symplectic_points && attempts < max_attempts {
                attempts += 1;
                let x = random_point(&model, inv.q_range, &mut rng)?;
                if !flow.psi_rev(&x).accepted() {
                    row.excluded += 1;
                    continue;
                }
                let Some(jac) = fd_step_jacobian(&flow.scheme, &solver, &x, 1e-4) else {
                    row.excluded += 1;
                    continue;
                };
                let err = (linalg::det(&jac, x.len()) - 1.0).abs();
                row.n_points += 1;
                row.max_error = row.max_error.max(err);
                if !(err < SYMPLECTIC_TOL) {
                    row.failures += 1;
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `ψ_rev ∘ ψ_rev = id` within `10 η_rev` relative error, per scheme,
/// backend and step size.
pub fn involution(cfg: &ExperimentConfig) -> Result<Vec<InvariantRow>> {
    let inv = &cfg.invariants;
    let model = cfg.model.build()?;
    let mut rows = Vec::new();
    for (si, scheme_kind) in [SchemeKind::Gsv, SchemeKind::Imr].into_iter().enumerate() {
        for backend in BACKENDS {
            let solver = Solver::new(backend, cfg.solver.config());
            let rev = rev_config(scheme_kind, cfg);
            for (di, &dt) in inv.involution_dts.iter().enumerate() {
                let flow = ReversibleFlow::new(
                    build_scheme(scheme_kind, &model, dt),
                    Involution::momentum_reversal(model.dim()),
                    solver,
                    rev,
                )?;
                let tol = INVOLUTION_FACTOR * rev.eta_rev;
                let mut rng = substream(cfg.seed, 200 + si, di);
                let mut row = InvariantRow {
                    check: "involution",
                    subject: format!("{}/{}", scheme_name(scheme_kind), backend_name(backend)),
                    dt,
                    n_points: inv.involution_points,
                    excluded: 0,
                    max_error: 0.0,
                    tolerance: tol,
                    failures: 0,
                };
                for _ in 0..inv.involution_points {
                    let x = random_point(&model, inv.q_range, &mut rng)?;
                    let once = flow.psi_rev(&x);
                    let twice = flow.psi_rev(&once.result);
                    let err = linalg::dist(&twice.result, &x) / linalg::norm(&x).max(crate::solvers::SCALE_FLOOR);
                    row.max_error = row.max_error.max(err);
                    if !(err <= tol) {
                        row.failures += 1;
                    }
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn oscillator() -> RmhmcHamiltonian {
    RmhmcHamiltonian::new(Arc::new(Quadratic::isotropic(1, 1.0)), Arc::new(ConstantDiffusion::scalar(1, 1.0)))
        .expect("matching dimensions")
}

/// Explicit Störmer–Verlet for `H = V(q) + ½ pᵀ D p` with constant `D`.
fn stormer_verlet(model: &RmhmcHamiltonian, dt: f64, x: &[f64]) -> Vec<f64> {
    let m = model.dim();
    let h = 0.5 * dt;
    let mut d = vec![0.0; m * m];
    model.diffusion().eval(&x[..m], &mut d);
    let mut g = vec![0.0; m];
    model.potential().gradient(&x[..m], &mut g);
    let half: Vec<f64> = (0..m).map(|i| x[m + i] - h * g[i]).collect();
    let mut dp = vec![0.0; m];
    linalg::mat_vec(&d, &half, &mut dp);
    let q1: Vec<f64> = (0..m).map(|i| x[i] + dt * dp[i]).collect();
    model.potential().gradient(&q1, &mut g);
    let p1: Vec<f64> = (0..m).map(|i| half[i] - h * g[i]).collect();
    [q1, p1].concat()
}

/// One-step agreement of the implicit scheme with constant `D` and explicit
/// Störmer–Verlet along a trajectory of the harmonic oscillator.
pub fn degeneracy(cfg: &ExperimentConfig) -> Result<InvariantRow> {
    let inv = &cfg.invariants;
    let model = oscillator();
    let dt = inv.degeneracy_dt;
    let scheme = Gsv::new(model.clone(), dt);
    let solver = cfg.solver.solver();
    let mut row = InvariantRow {
        check: "degeneracy",
        subject: format!("gsv/{}", backend_name(solver.backend)),
        dt,
        n_points: inv.degeneracy_steps,
        excluded: 0,
        max_error: 0.0,
        tolerance: DEGENERACY_TOL,
        failures: 0,
    };
    let mut x = vec![1.0, 0.0];
    for _ in 0..inv.degeneracy_steps {
        let explicit = stormer_verlet(&model, dt, &x);
        match step_map(&scheme, &solver, &x) {
            Some(y) => {
                let err = linalg::dist(&y, &explicit);
                row.max_error = row.max_error.max(err);
                if !(err < DEGENERACY_TOL) {
                    row.failures += 1;
                }
                x = y;
            }
            None => {
                row.failures += 1;
                x = explicit;
            }
        }
    }
    Ok(row)
}

/// Energy error of the implicit scheme on the harmonic oscillator, bounded
/// by `Δt² H₀ / 2`. The error reported is relative to that bound's scale `H₀`.
pub fn energy_drift(cfg: &ExperimentConfig) -> Result<InvariantRow> {
    let inv = &cfg.invariants;
    let model = oscillator();
    let dt = inv.degeneracy_dt;
    let scheme = Gsv::new(model.clone(), dt);
    let solver = cfg.solver.solver();
    let mut x = vec![1.0, 0.0];
    let h0 = model.energy(&x[..1], &x[1..]);
    let mut row = InvariantRow {
        check: "energy_error",
        subject: format!("gsv/{}", backend_name(solver.backend)),
        dt,
        n_points: inv.degeneracy_steps,
        excluded: 0,
        max_error: 0.0,
        tolerance: 0.5 * dt * dt,
        failures: 0,
    };
    for _ in 0..inv.degeneracy_steps {
        let Some(y) = step_map(&scheme, &solver, &x) else {
            row.failures += 1;
            break;
        };
        x = y;
        let err = (model.energy(&x[..1], &x[1..]) - h0).abs() / h0;
        row.max_error = row.max_error.max(err);
        if !(err <= row.tolerance) {
            row.failures += 1;
        }
    }
    Ok(row)
}

/// The three backends solve to the same chain wherever all converge.
pub fn solver_agreement(cfg: &ExperimentConfig) -> Result<Vec<InvariantRow>> {
    let inv = &cfg.invariants;
    let model = cfg.model.build()?;
    let dt = inv.agreement_dt;
    let solvers: Vec<Solver> = BACKENDS.iter().map(|&b| Solver::new(b, cfg.solver.config())).collect();
    let mut rows = Vec::new();
    for (si, scheme_kind) in [SchemeKind::Gsv, SchemeKind::Imr].into_iter().enumerate() {
        let scheme = build_scheme(scheme_kind, &model, dt);
        let mut rng = substream(cfg.seed, 300 + si, 0);
        let mut row = InvariantRow {
            check: "solver_agreement",
            subject: scheme_name(scheme_kind).to_owned(),
            dt,
            n_points: 0,
            excluded: 0,
            max_error: 0.0,
            tolerance: AGREEMENT_TOL,
            failures: 0,
        };
        for _ in 0..inv.agreement_points {
            let x = random_point(&model, inv.q_range, &mut rng)?;
            let results: Vec<_> = solvers.iter().map(|s| s.solve(&scheme, &x)).collect();
            if !results.iter().all(|r| r.converged()) {
                row.excluded += 1;
                continue;
            }
            row.n_points += 1;
            let err = results[1..].iter().map(|r| linalg::dist(&r.chain, &results[0].chain)).fold(0.0, f64::max);
            row.max_error = row.max_error.max(err);
            if !(err < AGREEMENT_TOL) {
                row.failures += 1;
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// For `V = q²/2` and `D = 1 + q²` the implicit momentum half step solves
/// `h q p̃² + p̃ - c = 0` with `c = p - h (q - q / (1 + q²))`. The solver must
/// return the real root nearest the explicit predictor `p - h ∇_q H(q, p)`.
/// Instances where either half step has no real solution are excluded.
pub fn quadratic_root(cfg: &ExperimentConfig) -> Result<InvariantRow> {
    let model = RmhmcHamiltonian::new(Arc::new(Quadratic::isotropic(1, 1.0)), Arc::new(OnePlusSquare))?;
    let solver = Solver::new(SolverBackend::NewtonSequential, cfg.solver.config());
    let mut rng = substream(cfg.seed, 400, 0);
    let mut row = InvariantRow {
        check: "quadratic_root",
        subject: "gsv/newton_sequential".to_owned(),
        dt: f64::NAN,
        n_points: 0,
        excluded: 0,
        max_error: 0.0,
        tolerance: ROOT_TOL,
        failures: 0,
    };
    let mut dt_max: f64 = 0.0;
    let mut attempts = 0;
    while row.n_points < ROOT_INSTANCES && attempts < 10 * ROOT_INSTANCES {
        attempts += 1;
        let q: f64 = rng.random_range(-2.0..2.0);
        let p: f64 = rng.random_range(-2.0..2.0);
        let dt: f64 = rng.random_range(0.01..0.2);
        dt_max = dt_max.max(dt);
        let h = 0.5 * dt;
        let c = p - h * (q - q / (1.0 + q * q));
        let mut g = [0.0];
        model.grad_q(&[q], &[p], &mut g);
        let predictor = p - h * g[0];
        let a = h * q;
        let root = if a == 0.0 {
            c
        } else {
            let disc = 1.0 + 4.0 * a * c;
            if disc < 0.0 {
                row.excluded += 1;
                continue;
            }
            let s = disc.sqrt();
            let r1 = (-1.0 + s) / (2.0 * a);
            let r2 = (-1.0 - s) / (2.0 * a);
            if (r1 - predictor).abs() <= (r2 - predictor).abs() {
                r1
            } else {
                r2
            }
        };
        // The position half step `b q₂² - q₂ + (q₁ + b) = 0` with `b = h p̃`
        // must also have a real root for the step to exist.
        let q1 = q + h * (1.0 + q * q) * root;
        let b = h * root;
        if 1.0 - 4.0 * b * (q1 + b) < 0.0 {
            row.excluded += 1;
            continue;
        }
        row.n_points += 1;
        let scheme = Gsv::new(model.clone(), dt);
        let res = solver.solve(&scheme, &[q, p]);
        let err = if res.converged() { (res.chain[1] - root).abs() / root.abs().max(1.0) } else { f64::INFINITY };
        row.max_error = row.max_error.max(err);
        if !(err < ROOT_TOL) {
            row.failures += 1;
        }
    }
    row.dt = dt_max;
    Ok(row)
}
