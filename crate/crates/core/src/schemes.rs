//! Implicit one-step schemes written as residual equations.
//!
//! A scheme with chain length `k` maps a state `x ∈ R^d` to a chain
//! `y = (y_1, ..., y_k) ∈ R^{dk}` defined by `Φ(x, y) = 0`; the step result
//! is `y_k`. The chain is what the reversibility check compares.

use crate::linalg::{zeros, zeros_vec};
use crate::model::{Hamiltonian, VectorField};
use crate::solvers::{self, SolveResult, SolverConfig};

pub trait Scheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn chain_len(&self) -> usize;
    fn dt(&self) -> f64;

    fn chain_dim(&self) -> usize {
        self.state_dim() * self.chain_len()
    }

    /// `Φ(x, y)`, length `d k`.
    fn residual(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `∇_y Φ`, row-major `dk x dk`.
    fn jac_y(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `∇_x Φ`, row-major `dk x d`.
    fn jac_x(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Explicit initial guess for the chain.
    fn predict(&self, x: &[f64], out: &mut [f64]);
    /// One sweep of the fixed-point iteration whose fixed points are the
    /// roots of `Φ(x, ·)`.
    fn fixed_point_sweep(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// Block-by-block Newton solve, for schemes whose Jacobian is block
    /// triangular. `None` if the scheme has no such structure.
    fn solve_blockwise(&self, _x: &[f64], _cfg: &SolverConfig) -> Option<SolveResult> {
        None
    }

    /// Whether comparing only the final position is a sound reversibility
    /// check for this scheme under momentum reversal.
    fn supports_position_only_check(&self) -> bool {
        false
    }
}

impl<S: Scheme + ?Sized> Scheme for Box<S> {
    fn name(&self) -> &'static str {
        (**self).name()
    }
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn chain_len(&self) -> usize {
        (**self).chain_len()
    }
    fn dt(&self) -> f64 {
        (**self).dt()
    }
    fn chain_dim(&self) -> usize {
        (**self).chain_dim()
    }
    fn residual(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (**self).residual(x, y, out)
    }
    fn jac_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (**self).jac_y(x, y, out)
    }
    fn jac_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (**self).jac_x(x, y, out)
    }
    fn predict(&self, x: &[f64], out: &mut [f64]) {
        (**self).predict(x, out)
    }
    fn fixed_point_sweep(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (**self).fixed_point_sweep(x, y, out)
    }
    fn solve_blockwise(&self, x: &[f64], cfg: &SolverConfig) -> Option<SolveResult> {
        (**self).solve_blockwise(x, cfg)
    }
    fn supports_position_only_check(&self) -> bool {
        (**self).supports_position_only_check()
    }
}

/// The involution `S` under which a scheme is reversible: negation of every
/// coordinate from `split` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Involution {
    pub kind: InvolutionKind,
    pub split: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvolutionKind {
    /// `(q, p) -> (q, -p)`
    MomentumReversal,
    /// `(q, ξ) -> (q, -ξ)`
    DirectionReversal,
}

impl Involution {
    pub fn momentum_reversal(m: usize) -> Self {
        Involution { kind: InvolutionKind::MomentumReversal, split: m }
    }

    pub fn direction_reversal(m: usize) -> Self {
        Involution { kind: InvolutionKind::DirectionReversal, split: m }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        out[..self.split].copy_from_slice(&x[..self.split]);
        for (o, v) in out[self.split..].iter_mut().zip(&x[self.split..]) {
            *o = -v;
        }
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        x[self.split..].iter_mut().for_each(|v| *v = -*v);
    }
}

/// `(q + h ∇_p H, p - h ∇_q H)`, all evaluated at `(q, p)`.
pub fn explicit_euler<H: Hamiltonian + ?Sized>(ham: &H, h: f64, x: &[f64], out: &mut [f64]) {
    let m = ham.dim();
    let (q, p) = x.split_at(m);
    let (oq, op) = out.split_at_mut(m);
    ham.grad_p(q, p, oq);
    ham.grad_q(q, p, op);
    for i in 0..m {
        oq[i] = q[i] + h * oq[i];
        op[i] = p[i] - h * op[i];
    }
}

/// Hessian blocks at one point.
struct Blocks {
    qq: crate::linalg::Buf,
    qp: crate::linalg::Buf,
    pp: crate::linalg::Buf,
}

impl Blocks {
    fn at<H: Hamiltonian + ?Sized>(ham: &H, q: &[f64], p: &[f64]) -> Self {
        let m = ham.dim();
        let mut b = Blocks { qq: zeros(m * m), qp: zeros(m * m), pp: zeros(m * m) };
        ham.hessian(q, p, &mut b.qq, &mut b.qp, &mut b.pp);
        b
    }
}

/// Writes the four `m x m` blocks `[[a, b], [c, d]]` into a row-major matrix
/// with leading dimension `ld` starting at `(r0, c0)`.
#[allow(clippy::too_many_arguments)]
fn put_blocks(
    out: &mut [f64],
    ld: usize,
    r0: usize,
    c0: usize,
    m: usize,
    f: impl Fn(usize, usize, usize) -> f64,
) {
    // f(block, i, j) with block 0..4 in row-major block order.
    for bi in 0..2 {
        for bj in 0..2 {
            for i in 0..m {
                for j in 0..m {
                    out[(r0 + bi * m + i) * ld + c0 + bj * m + j] = f(bi * 2 + bj, i, j);
                }
            }
        }
    }
}

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

/// Implicit midpoint rule.
#[derive(Debug, Clone)]
pub struct Imr<H> {
    pub ham: H,
    pub dt: f64,
}

impl<H: Hamiltonian> Imr<H> {
    pub fn new(ham: H, dt: f64) -> Self {
        Imr { ham, dt }
    }

    fn midpoint(&self, x: &[f64], y: &[f64]) -> crate::linalg::VecBuf {
        let mut mid = zeros_vec(x.len());
        for i in 0..x.len() {
            mid[i] = 0.5 * (x[i] + y[i]);
        }
        mid
    }

    /// Fills `[[I - h/2 qpᵀ, -h/2 pp], [h/2 qq, I + h/2 qp]]` with `sign`
    /// applied to the identity.
    fn jac(&self, x: &[f64], y: &[f64], id_sign: f64, out: &mut [f64]) {
        let m = self.ham.dim();
        let mid = self.midpoint(x, y);
        let b = Blocks::at(&self.ham, &mid[..m], &mid[m..]);
        let h2 = 0.5 * self.dt;
        put_blocks(out, 2 * m, 0, 0, m, |blk, i, j| match blk {
            0 => id_sign * delta(i, j) - h2 * b.qp[j * m + i],
            1 => -h2 * b.pp[i * m + j],
            2 => h2 * b.qq[i * m + j],
            _ => id_sign * delta(i, j) + h2 * b.qp[i * m + j],
        });
    }
}

impl<H: Hamiltonian> Scheme for Imr<H> {
    fn name(&self) -> &'static str {
        "imr"
    }

    fn state_dim(&self) -> usize {
        2 * self.ham.dim()
    }

    fn chain_len(&self) -> usize {
        1
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn residual(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.ham.dim();
        let mid = self.midpoint(x, y);
        let (oq, op) = out.split_at_mut(m);
        self.ham.grad_p(&mid[..m], &mid[m..], oq);
        self.ham.grad_q(&mid[..m], &mid[m..], op);
        for i in 0..m {
            oq[i] = y[i] - x[i] - self.dt * oq[i];
            op[i] = y[m + i] - x[m + i] + self.dt * op[i];
        }
    }

    fn jac_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.jac(x, y, 1.0, out);
    }

    fn jac_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.jac(x, y, -1.0, out);
    }

    fn predict(&self, x: &[f64], out: &mut [f64]) {
        explicit_euler(&self.ham, self.dt, x, out);
    }

    fn fixed_point_sweep(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.ham.dim();
        let mid = self.midpoint(x, y);
        let (oq, op) = out.split_at_mut(m);
        self.ham.grad_p(&mid[..m], &mid[m..], oq);
        self.ham.grad_q(&mid[..m], &mid[m..], op);
        for i in 0..m {
            oq[i] = x[i] + self.dt * oq[i];
            op[i] = x[m + i] - self.dt * op[i];
        }
    }
}

/// Symplectic Euler, implicit in the momentum:
/// `q1 = q + h ∇_p H(q, p1)`, `p1 = p - h ∇_q H(q, p1)`.
#[derive(Debug, Clone)]
pub struct EulerB<H> {
    pub ham: H,
    pub h: f64,
}

/// Symplectic Euler, implicit in the position:
/// `q1 = q + h ∇_p H(q1, p)`, `p1 = p - h ∇_q H(q1, p)`.
#[derive(Debug, Clone)]
pub struct EulerA<H> {
    pub ham: H,
    pub h: f64,
}

fn euler_b_residual<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
    let m = ham.dim();
    let (q, p) = x.split_at(m);
    let (q1, p1) = y.split_at(m);
    let (oq, op) = out.split_at_mut(m);
    ham.grad_p(q, p1, oq);
    ham.grad_q(q, p1, op);
    for i in 0..m {
        oq[i] = q1[i] - q[i] - h * oq[i];
        op[i] = p1[i] - p[i] + h * op[i];
    }
}

fn euler_a_residual<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
    let m = ham.dim();
    let (q, p) = x.split_at(m);
    let (q1, p1) = y.split_at(m);
    let (oq, op) = out.split_at_mut(m);
    ham.grad_p(q1, p, oq);
    ham.grad_q(q1, p, op);
    for i in 0..m {
        oq[i] = q1[i] - q[i] - h * oq[i];
        op[i] = p1[i] - p[i] + h * op[i];
    }
}

fn euler_b_jac_y<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &[f64], out: &mut [f64], ld: usize, r0: usize, c0: usize) {
    let m = ham.dim();
    let b = Blocks::at(ham, &x[..m], &y[m..]);
    put_blocks(out, ld, r0, c0, m, |blk, i, j| match blk {
        0 => delta(i, j),
        1 => -h * b.pp[i * m + j],
        2 => 0.0,
        _ => delta(i, j) + h * b.qp[i * m + j],
    });
}

fn euler_b_jac_x<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &[f64], out: &mut [f64], ld: usize, r0: usize, c0: usize) {
    let m = ham.dim();
    let b = Blocks::at(ham, &x[..m], &y[m..]);
    put_blocks(out, ld, r0, c0, m, |blk, i, j| match blk {
        0 => -delta(i, j) - h * b.qp[j * m + i],
        1 => 0.0,
        2 => h * b.qq[i * m + j],
        _ => -delta(i, j),
    });
}

fn euler_a_jac_y<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &[f64], out: &mut [f64], ld: usize, r0: usize, c0: usize) {
    let m = ham.dim();
    let b = Blocks::at(ham, &y[..m], &x[m..]);
    put_blocks(out, ld, r0, c0, m, |blk, i, j| match blk {
        0 => delta(i, j) - h * b.qp[j * m + i],
        1 => 0.0,
        2 => h * b.qq[i * m + j],
        _ => delta(i, j),
    });
}

fn euler_a_jac_x<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &[f64], out: &mut [f64], ld: usize, r0: usize, c0: usize) {
    let m = ham.dim();
    let b = Blocks::at(ham, &y[..m], &x[m..]);
    put_blocks(out, ld, r0, c0, m, |blk, i, j| match blk {
        0 => -delta(i, j),
        1 => -h * b.pp[i * m + j],
        2 => 0.0,
        _ => -delta(i, j) + h * b.qp[i * m + j],
    });
}

/// `p1 = p - h ∇_q H(q, p1)`, `q1 = q + h ∇_p H(q, p1)`, updating `y` in place.
fn euler_b_sweep<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &mut [f64]) {
    let m = ham.dim();
    let mut g = zeros_vec(m);
    ham.grad_q(&x[..m], &y[m..], &mut g);
    for i in 0..m {
        y[m + i] = x[m + i] - h * g[i];
    }
    ham.grad_p(&x[..m], &y[m..], &mut g);
    for i in 0..m {
        y[i] = x[i] + h * g[i];
    }
}

/// `q1 = q + h ∇_p H(q1, p)`, `p1 = p - h ∇_q H(q1, p)`, updating `y` in place.
fn euler_a_sweep<H: Hamiltonian>(ham: &H, h: f64, x: &[f64], y: &mut [f64]) {
    let m = ham.dim();
    let mut g = zeros_vec(m);
    ham.grad_p(&y[..m], &x[m..], &mut g);
    for i in 0..m {
        y[i] = x[i] + h * g[i];
    }
    ham.grad_q(&y[..m], &x[m..], &mut g);
    for i in 0..m {
        y[m + i] = x[m + i] - h * g[i];
    }
}

impl<H: Hamiltonian> Scheme for EulerB<H> {
    fn name(&self) -> &'static str {
        "euler_b"
    }
    fn state_dim(&self) -> usize {
        2 * self.ham.dim()
    }
    fn chain_len(&self) -> usize {
        1
    }
    fn dt(&self) -> f64 {
        self.h
    }
    fn residual(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        euler_b_residual(&self.ham, self.h, x, y, out);
    }
    fn jac_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        euler_b_jac_y(&self.ham, self.h, x, y, out, self.state_dim(), 0, 0);
    }
    fn jac_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        euler_b_jac_x(&self.ham, self.h, x, y, out, self.state_dim(), 0, 0);
    }
    fn predict(&self, x: &[f64], out: &mut [f64]) {
        explicit_euler(&self.ham, self.h, x, out);
    }
    fn fixed_point_sweep(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
        euler_b_sweep(&self.ham, self.h, x, out);
    }
}

impl<H: Hamiltonian> Scheme for EulerA<H> {
    fn name(&self) -> &'static str {
        "euler_a"
    }
    fn state_dim(&self) -> usize {
        2 * self.ham.dim()
    }
    fn chain_len(&self) -> usize {
        1
    }
    fn dt(&self) -> f64 {
        self.h
    }
    fn residual(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        euler_a_residual(&self.ham, self.h, x, y, out);
    }
    fn jac_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        euler_a_jac_y(&self.ham, self.h, x, y, out, self.state_dim(), 0, 0);
    }
    fn jac_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        euler_a_jac_x(&self.ham, self.h, x, y, out, self.state_dim(), 0, 0);
    }
    fn predict(&self, x: &[f64], out: &mut [f64]) {
        explicit_euler(&self.ham, self.h, x, out);
    }
    fn fixed_point_sweep(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
        euler_a_sweep(&self.ham, self.h, x, out);
    }
}

/// Generalized Störmer–Verlet: a half step of [`EulerB`] followed by a half
/// step of [`EulerA`]. The chain is `(y_1, y_2)` with
/// `y_1 = (q + Δt/2 ∇_p H(q, p̃), p̃)` the intermediate state.
#[derive(Debug, Clone)]
pub struct Gsv<H> {
    pub ham: H,
    pub dt: f64,
}

impl<H: Hamiltonian> Gsv<H> {
    pub fn new(ham: H, dt: f64) -> Self {
        Gsv { ham, dt }
    }
}

impl<H: Hamiltonian> Scheme for Gsv<H> {
    fn name(&self) -> &'static str {
        "gsv"
    }

    fn state_dim(&self) -> usize {
        2 * self.ham.dim()
    }

    fn chain_len(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn residual(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let h = 0.5 * self.dt;
        let (y1, y2) = y.split_at(d);
        let (o1, o2) = out.split_at_mut(d);
        euler_b_residual(&self.ham, h, x, y1, o1);
        euler_a_residual(&self.ham, h, y1, y2, o2);
    }

    fn jac_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let ld = 2 * d;
        let h = 0.5 * self.dt;
        let (y1, y2) = y.split_at(d);
        euler_b_jac_y(&self.ham, h, x, y1, out, ld, 0, 0);
        for i in 0..d {
            for j in d..ld {
                out[i * ld + j] = 0.0;
            }
        }
        euler_a_jac_x(&self.ham, h, y1, y2, out, ld, d, 0);
        euler_a_jac_y(&self.ham, h, y1, y2, out, ld, d, d);
    }

    fn jac_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let h = 0.5 * self.dt;
        euler_b_jac_x(&self.ham, h, x, &y[..d], out, d, 0, 0);
        out[d * d..].iter_mut().for_each(|v| *v = 0.0);
    }

    fn predict(&self, x: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let h = 0.5 * self.dt;
        let (y1, y2) = out.split_at_mut(d);
        explicit_euler(&self.ham, h, x, y1);
        explicit_euler(&self.ham, h, y1, y2);
    }

    fn fixed_point_sweep(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let h = 0.5 * self.dt;
        out.copy_from_slice(y);
        let (o1, o2) = out.split_at_mut(d);
        euler_b_sweep(&self.ham, h, x, o1);
        euler_a_sweep(&self.ham, h, o1, o2);
    }

    fn solve_blockwise(&self, x: &[f64], cfg: &SolverConfig) -> Option<SolveResult> {
        Some(solvers::gsv_sequential(&self.ham, self.dt, x, cfg))
    }

    fn supports_position_only_check(&self) -> bool {
        true
    }
}

/// Implicit midpoint discretization of `q' = ξ γ(q)`, `ξ' = 0` on states
/// `(q, ξ)`, reversible under `ξ -> -ξ`.
#[derive(Clone)]
pub struct GhmalaScheme<F> {
    pub field: F,
    pub dt: f64,
}

impl<F: VectorField> GhmalaScheme<F> {
    pub fn new(field: F, dt: f64) -> Self {
        GhmalaScheme { field, dt }
    }

    fn mid(&self, x: &[f64], y: &[f64]) -> crate::linalg::VecBuf {
        let m = self.field.dim();
        let mut mid = zeros_vec(m);
        for i in 0..m {
            mid[i] = 0.5 * (x[i] + y[i]);
        }
        mid
    }
}

impl<F: VectorField> Scheme for GhmalaScheme<F> {
    fn name(&self) -> &'static str {
        "ghmala"
    }

    fn state_dim(&self) -> usize {
        self.field.dim() + 1
    }

    fn chain_len(&self) -> usize {
        1
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn residual(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.field.dim();
        let xi = x[m];
        let mid = self.mid(x, y);
        self.field.eval(&mid, &mut out[..m]);
        for i in 0..m {
            out[i] = y[i] - x[i] - self.dt * xi * out[i];
        }
        out[m] = y[m] - xi;
    }

    fn jac_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.field.dim();
        let d = m + 1;
        let xi = x[m];
        let mut g = zeros(m * m);
        self.field.jacobian(&self.mid(x, y), &mut g);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            for j in 0..m {
                out[i * d + j] = delta(i, j) - 0.5 * self.dt * xi * g[i * m + j];
            }
        }
        out[m * d + m] = 1.0;
    }

    fn jac_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.field.dim();
        let d = m + 1;
        let xi = x[m];
        let mid = self.mid(x, y);
        let mut g = zeros(m * m);
        let mut gam = zeros_vec(m);
        self.field.jacobian(&mid, &mut g);
        self.field.eval(&mid, &mut gam);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            for j in 0..m {
                out[i * d + j] = -delta(i, j) - 0.5 * self.dt * xi * g[i * m + j];
            }
            out[i * d + m] = -self.dt * gam[i];
        }
        out[m * d + m] = -1.0;
    }

    fn predict(&self, x: &[f64], out: &mut [f64]) {
        let m = self.field.dim();
        self.field.eval(&x[..m], &mut out[..m]);
        for i in 0..m {
            out[i] = x[i] + self.dt * x[m] * out[i];
        }
        out[m] = x[m];
    }

    fn fixed_point_sweep(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.field.dim();
        let mid = self.mid(x, y);
        self.field.eval(&mid, &mut out[..m]);
        for i in 0..m {
            out[i] = x[i] + self.dt * x[m] * out[i];
        }
        out[m] = x[m];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::*;
    use crate::model::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn oscillator() -> RmhmcHamiltonian {
        RmhmcHamiltonian::new(Arc::new(Quadratic::isotropic(1, 1.0)), Arc::new(ConstantDiffusion::scalar(1, 1.0))).unwrap()
    }

    fn double_well() -> RmhmcHamiltonian {
        RmhmcHamiltonian::new(Arc::new(DoubleWell::default()), Arc::new(CosineSquared::default())).unwrap()
    }

    fn ring() -> RmhmcHamiltonian {
        RmhmcHamiltonian::new(Arc::new(Circle::default()), Arc::new(Anisotropic::planar(0.1))).unwrap()
    }

    fn check_jacobians(s: &dyn Scheme, x: &[f64], y: &[f64]) {
        let n = s.chain_dim();
        let d = s.state_dim();
        let mut jy = vec![0.0; n * n];
        s.jac_y(x, y, &mut jy);
        let fd = fd_jacobian(|z, out| s.residual(x, z, out), y, n, 1e-6);
        assert_close(&jy, &fd, 1e-5);
        let mut jx = vec![0.0; n * d];
        s.jac_x(x, y, &mut jx);
        let fd = fd_jacobian(|z, out| s.residual(z, y, out), x, n, 1e-6);
        assert_close(&jx, &fd, 1e-5);
    }

    #[test]
    fn imr_predictor_and_residual_on_oscillator() {
        let s = Imr::new(oscillator(), 0.1);
        let x = [0.0, 1.0];
        let mut y = [0.0; 2];
        s.predict(&x, &mut y);
        assert_eq!(y, [0.1, 1.0]);
        // Exact IMR step of the oscillator.
        let sol = [0.1 / 1.0025, 1.0 - 0.005 / 1.0025];
        let mut r = [0.0; 2];
        s.residual(&x, &sol, &mut r);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gsv_chain_on_oscillator() {
        // Separable H = (q² + p²)/2, Δt = 0.1, x = (0, 1):
        // p̃ = 1, q1 = 0.05, q2 = 0.1, p2 = 1 - 0.05·0.1 = 0.995.
        let s = Gsv::new(oscillator(), 0.1);
        let x = [0.0, 1.0];
        let chain = [0.05, 1.0, 0.1, 0.995];
        let mut r = [0.0; 4];
        s.residual(&x, &chain, &mut r);
        assert!(r.iter().all(|v| v.abs() < 1e-16), "{r:?}");
    }

    #[test]
    fn ghmala_rotation_root() {
        let field = RotatedGradient::planar(Arc::new(Quadratic::isotropic(2, 1.0)));
        let s = GhmalaScheme::new(field, 0.1);
        let x = [1.0, 0.0, 1.0];
        // (I - 0.05 R) q1 = (I + 0.05 R) q for R q = (q2, -q1).
        let a = 0.9975 / 1.0025;
        let y = [a, -0.05 - 0.05 * a, 1.0];
        let mut r = [0.0; 3];
        s.residual(&x, &y, &mut r);
        assert!(r.iter().all(|v| v.abs() < 1e-15), "{r:?}");
        assert!((y[0] - 0.995_012_47).abs() < 1e-8 && (y[1] + 0.099_750_62).abs() < 1e-8);
    }

    #[test]
    fn involutions() {
        let s = Involution::momentum_reversal(2);
        let mut out = [0.0; 4];
        s.apply(&[1.0, 2.0, 3.0, -4.0], &mut out);
        assert_eq!(out, [1.0, 2.0, -3.0, 4.0]);
        let t = Involution::direction_reversal(2);
        let mut out = [0.0; 3];
        t.apply(&[1.0, 2.0, 1.0], &mut out);
        assert_eq!(out, [1.0, 2.0, -1.0]);
    }

    proptest! {
        #[test]
        fn jacobians_match_finite_differences(
            q in -1.5..1.5f64, p in -2.0..2.0f64, a in -1.5..1.5f64, b in -1.5..1.5f64,
            dq in -0.2..0.2f64, dp in -0.2..0.2f64, dt in 0.01..0.8f64,
        ) {
            let dw = double_well();
            let x = [q, p];
            let y = [q + dq, p + dp];
            check_jacobians(&Imr::new(dw.clone(), dt), &x, &y);
            check_jacobians(&EulerA { ham: dw.clone(), h: dt }, &x, &y);
            check_jacobians(&EulerB { ham: dw.clone(), h: dt }, &x, &y);
            check_jacobians(&Gsv::new(dw, dt), &x, &[q + dq, p - dp, q - dp, p + dq]);

            prop_assume!(a.abs() + b.abs() > 0.3);
            let x = [a, b, p, q];
            let y = [a + dq, b + dp, p - dq, q + dp];
            check_jacobians(&Imr::new(ring(), dt), &x, &y);
            check_jacobians(&Gsv::new(ring(), dt), &x, &[a, b + dq, p, q, a + dp, b, p - dq, q]);
            let field = RotatedGradient::planar(Arc::new(Circle::default()));
            check_jacobians(&GhmalaScheme::new(field, dt), &[a, b, 1.0], &[a + dq, b + dp, -1.0]);
        }

        #[test]
        fn schemes_are_reversible(q in -1.5..1.5f64, p in -2.0..2.0f64, dq in -0.3..0.3f64, dp in -0.3..0.3f64, dt in 0.01..0.8f64) {
            // The residual of the reversed chain is the residual of the
            // forward chain up to signs, so roots map to roots.
            let s = Involution::momentum_reversal(1);
            let dw = double_well();
            let x = [q, p];
            let y = [q + dq, p + dp];
            let (mut sx, mut sy) = ([0.0; 2], [0.0; 2]);
            s.apply(&x, &mut sx);
            s.apply(&y, &mut sy);
            for scheme in [&Imr::new(dw.clone(), dt) as &dyn Scheme] {
                let (mut r, mut rr) = ([0.0; 2], [0.0; 2]);
                scheme.residual(&x, &y, &mut r);
                scheme.residual(&sy, &sx, &mut rr);
                prop_assert!((rr[0] + r[0]).abs() < 1e-12 * (1.0 + r[0].abs()));
                prop_assert!((rr[1] - r[1]).abs() < 1e-12 * (1.0 + r[1].abs()));
            }
            // GSV: the Euler B block of the reversed chain is the reversed
            // Euler A block and vice versa.
            let g = Gsv::new(dw, dt);
            let chain = [q + dq, p - dp, q - dp, p + dq];
            let mut r = [0.0; 4];
            g.residual(&x, &chain, &mut r);
            let mut sy1 = [0.0; 2];
            s.apply(&chain[..2], &mut sy1);
            let mut sy2 = [0.0; 2];
            s.apply(&chain[2..], &mut sy2);
            let rchain = [sy1[0], sy1[1], sx[0], sx[1]];
            let mut rr = [0.0; 4];
            g.residual(&sy2, &rchain, &mut rr);
            prop_assert!((rr[0] + r[2]).abs() < 1e-12 * (1.0 + r[2].abs()));
            prop_assert!((rr[1] - r[3]).abs() < 1e-12 * (1.0 + r[3].abs()));
            prop_assert!((rr[2] + r[0]).abs() < 1e-12 * (1.0 + r[0].abs()));
            prop_assert!((rr[3] - r[1]).abs() < 1e-12 * (1.0 + r[1].abs()));
        }
    }
}
