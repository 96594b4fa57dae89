//! Markov kernels built on the reversibility-checked flow.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, zeros, zeros_vec};
use crate::model::{Hamiltonian, Potential, RmhmcHamiltonian, VectorField};
use crate::revflow::{FlowOutcome, RejectionStats, ReversibleFlow};
use crate::schemes::{GhmalaScheme, Scheme};

/// The random source of every chain.
pub type ChainRng = ChaCha20Rng;

/// Generator for chain `stream` of a run seeded with `seed`. Streams of the
/// same seed are independent.
pub fn chain_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Hmc,
    Ghmc,
    Ghmala,
    HmcForwardOnly,
    GhmcForwardOnly,
}

impl KernelKind {
    pub fn forward_only(self) -> bool {
        matches!(self, KernelKind::HmcForwardOnly | KernelKind::GhmcForwardOnly)
    }

    pub fn partial_refresh(self) -> bool {
        matches!(self, KernelKind::Ghmc | KernelKind::GhmcForwardOnly)
    }

    /// The same kernel with the full reversibility check.
    pub fn checked(self) -> Self {
        match self {
            KernelKind::HmcForwardOnly => KernelKind::Hmc,
            KernelKind::GhmcForwardOnly => KernelKind::Ghmc,
            k => k,
        }
    }

    /// The same kernel with only the forward convergence check. GHMALA has
    /// no such variant.
    pub fn unchecked(self) -> Option<Self> {
        match self {
            KernelKind::Hmc | KernelKind::HmcForwardOnly => Some(KernelKind::HmcForwardOnly),
            KernelKind::Ghmc | KernelKind::GhmcForwardOnly => Some(KernelKind::GhmcForwardOnly),
            KernelKind::Ghmala => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Hmc => "hmc",
            KernelKind::Ghmc => "ghmc",
            KernelKind::Ghmala => "ghmala",
            KernelKind::HmcForwardOnly => "hmc_forward_only",
            KernelKind::GhmcForwardOnly => "ghmc_forward_only",
        }
    }
}

/// Discretization of the half-step Ornstein–Uhlenbeck momentum update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdUpdate {
    /// `p' = (I + Δt/4 γD)⁻¹ [(I - Δt/4 γD) p + √(γΔt) G]`, which preserves
    /// `N(0, D⁻¹)` exactly.
    Midpoint,
    /// Exact solution; requires diagonal `D`.
    ExactOu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub dt: f64,
    pub gamma: f64,
    pub fd_update: FdUpdate,
    /// Step of the MALA move inside GHMALA; defaults to `dt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mala_dt: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { kind: KernelKind::Ghmc, dt: 0.15, gamma: 1.0, fd_update: FdUpdate::Midpoint, mala_dt: None }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("kernel.dt must be positive, got {}", self.dt)));
        }
        if self.kind.partial_refresh() && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("kernel.gamma must be positive, got {}", self.gamma)));
        }
        if let Some(h) = self.mala_dt {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("kernel.mala_dt must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// State of one chain: the flat point (`[q; p]` or `[q; ξ]`), its random
/// source and its rejection tally.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub step_index: u64,
    pub rng: ChainRng,
    pub stats: RejectionStats,
}

impl ChainState {
    pub fn new(x: Vec<f64>, rng: ChainRng) -> Self {
        ChainState { x, step_index: 0, rng, stats: RejectionStats::default() }
    }
}

pub trait Kernel: Send + Sync {
    /// Position dimension `m`; the position is `state.x[..m]`.
    fn position_dim(&self) -> usize;
    fn step(&self, state: &mut ChainState) -> Result<()>;
}

/// Runs `n` steps, calling `observe` on each new state.
pub fn run_chain<K: Kernel + ?Sized>(
    kernel: &K,
    state: &mut ChainState,
    n: u64,
    mut observe: impl FnMut(&[f64]),
) -> Result<()> {
    for _ in 0..n {
        kernel.step(state)?;
        observe(&state.x);
    }
    Ok(())
}

/// Metropolis test of `log_ratio` against the uniform `u`. Returns whether
/// the move is accepted and the rejection probability `1 - min(1, e^r)`.
pub fn metropolis(log_ratio: f64, u: f64) -> (bool, f64) {
    if log_ratio.is_nan() {
        return (false, 1.0);
    }
    let a = log_ratio.exp().min(1.0);
    (u <= a, 1.0 - a)
}

fn normals(rng: &mut ChainRng, out: &mut [f64]) {
    for g in out.iter_mut() {
        *g = rng.sample(StandardNormal);
    }
}

/// HMC and GHMC on the Riemannian-manifold Hamiltonian, with either `ψ_rev`
/// or the unchecked `ψ_fwd`.
#[derive(Debug, Clone)]
pub struct HamiltonianKernel<S> {
    model: RmhmcHamiltonian,
    flow: ReversibleFlow<S>,
    cfg: KernelConfig,
}

impl<S: Scheme> HamiltonianKernel<S> {
    pub fn new(model: RmhmcHamiltonian, flow: ReversibleFlow<S>, cfg: KernelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind == KernelKind::Ghmala {
            return Err(Error::Config("GHMALA runs on (q, ξ) states; use GhmalaKernel".into()));
        }
        if flow.scheme.dt() != cfg.dt {
            return Err(Error::Config(format!(
                "scheme step {} does not match kernel.dt {}",
                flow.scheme.dt(),
                cfg.dt
            )));
        }
        if flow.scheme.state_dim() != 2 * model.dim() {
            return Err(Error::Config("scheme and model dimensions differ".into()));
        }
        if cfg.kind.partial_refresh() && cfg.fd_update == FdUpdate::ExactOu && !model.diffusion().is_diagonal() {
            return Err(Error::Config("exact_ou requires a diagonal diffusion matrix".into()));
        }
        Ok(HamiltonianKernel { model, flow, cfg })
    }

    pub fn model(&self) -> &RmhmcHamiltonian {
        &self.model
    }

    pub fn flow(&self) -> &ReversibleFlow<S> {
        &self.flow
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let m = self.model.dim();
        self.model.energy(&x[..m], &x[m..])
    }

    fn apply_flow(&self, x: &[f64]) -> FlowOutcome {
        if self.cfg.kind.forward_only() {
            self.flow.psi_fwd(x)
        } else {
            self.flow.psi_rev(x)
        }
    }

    /// Half step of the momentum Ornstein–Uhlenbeck process at fixed `q`.
    pub fn fluctuation_dissipation(&self, q: &[f64], p: &mut [f64], g: &[f64]) {
        let m = self.model.dim();
        let dt = self.cfg.dt;
        let gamma = self.cfg.gamma;
        let mut d = zeros(m * m);
        self.model.diffusion().eval(q, &mut d);
        match self.cfg.fd_update {
            FdUpdate::Midpoint => {
                let a = 0.25 * dt * gamma;
                let mut rhs = zeros_vec(m);
                linalg::mat_vec(&d, p, &mut rhs);
                let noise = (gamma * dt).sqrt();
                for i in 0..m {
                    rhs[i] = p[i] - a * rhs[i] + noise * g[i];
                }
                let mut lhs = d;
                for v in lhs.iter_mut() {
                    *v *= a;
                }
                for i in 0..m {
                    lhs[i * m + i] += 1.0;
                }
                let ok = linalg::lu_solve(&mut lhs, &mut rhs);
                debug_assert!(ok, "I + (Δt/4)γD is positive definite");
                p.copy_from_slice(&rhs);
            }
            FdUpdate::ExactOu => {
                for i in 0..m {
                    let di = d[i * m + i];
                    let decay = (-0.5 * gamma * di * dt).exp();
                    let sd = ((1.0 - decay * decay) / di).sqrt();
                    p[i] = decay * p[i] + sd * g[i];
                }
            }
        }
    }

    /// Flow, Metropolis test and bookkeeping; returns the new flat state.
    fn propose(&self, x: Vec<f64>, state: &mut ChainState) -> Vec<f64> {
        let h0 = self.energy(&x);
        let out = self.apply_flow(&x);
        let h1 = self.energy(&out.result);
        let u: f64 = state.rng.random();
        let (accept, reject_prob) = metropolis(h0 - h1, u);
        state.stats.record(out.category, !accept, reject_prob);
        if accept {
            out.result
        } else {
            x
        }
    }
}

impl<S: Scheme> Kernel for HamiltonianKernel<S> {
    fn position_dim(&self) -> usize {
        self.model.dim()
    }

    fn step(&self, state: &mut ChainState) -> Result<()> {
        let m = self.model.dim();
        let mut g = zeros_vec(m);
        let mut x = std::mem::take(&mut state.x);
        self.model.diffusion().check_domain(&x[..m])?;
        normals(&mut state.rng, &mut g);
        if self.cfg.kind.partial_refresh() {
            let (q, p) = x.split_at_mut(m);
            self.fluctuation_dissipation(q, p, &g);
            let mut y = self.propose(x, state);
            let (q, p) = y.split_at_mut(m);
            p.iter_mut().for_each(|v| *v = -*v);
            self.model.diffusion().check_domain(q)?;
            normals(&mut state.rng, &mut g);
            self.fluctuation_dissipation(q, p, &g);
            state.x = y;
        } else {
            let (q, p) = x.split_at_mut(m);
            self.model.sample_momentum(q, &g, p)?;
            state.x = self.propose(x, state);
        }
        state.step_index += 1;
        Ok(())
    }
}

/// `ln T(a -> b)` for the Gaussian proposal `b ~ N(a - h ∇V(a), 2h I)`, up
/// to a constant.
fn mala_log_transition(potential: &dyn Potential, a: &[f64], b: &[f64], h: f64) -> f64 {
    let m = a.len();
    let mut g = zeros_vec(m);
    potential.gradient(a, &mut g);
    let s: f64 = (0..m).map(|i| (b[i] - a[i] + h * g[i]).powi(2)).sum();
    -s / (4.0 * h)
}

/// Log acceptance ratio of the MALA move `q -> q_prop` with step `h`.
pub fn mala_log_ratio(potential: &dyn Potential, q: &[f64], q_prop: &[f64], h: f64) -> f64 {
    potential.value(q) - potential.value(q_prop) + mala_log_transition(potential, q_prop, q, h)
        - mala_log_transition(potential, q, q_prop, h)
}

/// GHMALA: a MALA move on `q`, then the checked direction-reversal flow of
/// `q' = ξ γ(q)` with a Metropolis test on `V`, then `ξ -> -ξ`.
#[derive(Clone)]
pub struct GhmalaKernel<F> {
    potential: Arc<dyn Potential>,
    flow: ReversibleFlow<GhmalaScheme<F>>,
    cfg: KernelConfig,
}

impl<F: VectorField> GhmalaKernel<F> {
    pub fn new(potential: Arc<dyn Potential>, flow: ReversibleFlow<GhmalaScheme<F>>, cfg: KernelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind != KernelKind::Ghmala {
            return Err(Error::Config("GhmalaKernel needs kernel kind ghmala".into()));
        }
        if flow.scheme.dt != cfg.dt {
            return Err(Error::Config("scheme step does not match kernel.dt".into()));
        }
        if flow.scheme.field.dim() != potential.dim() {
            return Err(Error::Config("vector field and potential dimensions differ".into()));
        }
        Ok(GhmalaKernel { potential, flow, cfg })
    }

    fn mala_dt(&self) -> f64 {
        self.cfg.mala_dt.unwrap_or(self.cfg.dt)
    }
}

impl<F: VectorField> Kernel for GhmalaKernel<F> {
    fn position_dim(&self) -> usize {
        self.potential.dim()
    }

    fn step(&self, state: &mut ChainState) -> Result<()> {
        let m = self.potential.dim();
        let h = self.mala_dt();
        let mut x = std::mem::take(&mut state.x);

        let mut g = zeros_vec(m);
        let mut prop = zeros_vec(m);
        normals(&mut state.rng, &mut g);
        self.potential.gradient(&x[..m], &mut prop);
        let noise = (2.0 * h).sqrt();
        for i in 0..m {
            prop[i] = x[i] - h * prop[i] + noise * g[i];
        }
        let u: f64 = state.rng.random();
        let (accept, _) = metropolis(mala_log_ratio(&*self.potential, &x[..m], &prop, h), u);
        if accept {
            x[..m].copy_from_slice(&prop);
        }

        let v0 = self.potential.value(&x[..m]);
        let out = self.flow.psi_rev(&x);
        let v1 = self.potential.value(&out.result[..m]);
        let u: f64 = state.rng.random();
        let (accept, reject_prob) = metropolis(v0 - v1, u);
        state.stats.record(out.category, !accept, reject_prob);
        let mut y = if accept { out.result } else { x };
        y[m] = -y[m];
        state.x = y;
        state.step_index += 1;
        Ok(())
    }
}
