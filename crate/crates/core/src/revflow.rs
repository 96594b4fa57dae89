//! The reversibility-checked flow `ψ_rev`.
//!
//! A solve of an implicit scheme may fail, or may land on a root the reverse
//! solve does not find again. `ψ_rev` accepts a step only when the forward
//! solve, the backward solve from `S(y_k)` and the chain comparison all
//! succeed, and is the identity otherwise. The result is an exact involution
//! regardless of which root the solver picks, which keeps the Metropolis
//! correction valid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::schemes::{Involution, InvolutionKind, Scheme};
use crate::solvers::{SolveResult, Solver, SCALE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    /// Compare the whole backward chain with the reversed forward chain.
    FullChain,
    /// Compare only the final backward position with the starting position.
    PositionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevConfig {
    pub eta_rev: f64,
    pub check_mode: CheckMode,
    /// In `PositionOnly` mode, also compare the intermediate chain states.
    pub check_intermediate: bool,
}

impl Default for RevConfig {
    fn default() -> Self {
        RevConfig { eta_rev: 1e-8, check_mode: CheckMode::FullChain, check_intermediate: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowCategory {
    Accepted,
    ForwardFail,
    BackwardFail,
    ReversibilityFail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    /// `S(y_k)` when accepted, otherwise the input unchanged.
    pub result: Vec<f64>,
    pub category: FlowCategory,
    pub forward: Option<SolveResult>,
    pub backward: Option<SolveResult>,
}

impl FlowOutcome {
    pub fn accepted(&self) -> bool {
        self.category == FlowCategory::Accepted
    }
}

/// A scheme together with its involution, solver and check settings.
#[derive(Debug, Clone)]
pub struct ReversibleFlow<S> {
    pub scheme: S,
    pub involution: Involution,
    pub solver: Solver,
    pub rev: RevConfig,
}

impl<S: Scheme> ReversibleFlow<S> {
    pub fn new(scheme: S, involution: Involution, solver: Solver, rev: RevConfig) -> Result<Self> {
        if !(rev.eta_rev > 0.0) {
            return Err(Error::Config(format!("eta_rev must be positive, got {}", rev.eta_rev)));
        }
        if rev.check_mode == CheckMode::PositionOnly
            && !(scheme.supports_position_only_check()
                && involution.kind == InvolutionKind::MomentumReversal)
        {
            return Err(Error::Config(format!(
                "position-only reversibility check requires the generalized Störmer–Verlet scheme \
                 with momentum reversal (got {})",
                scheme.name()
            )));
        }
        if involution.split >= scheme.state_dim() {
            return Err(Error::Config("involution does not fit the scheme's state".into()));
        }
        Ok(ReversibleFlow { scheme, involution, solver, rev })
    }

    fn rejected(x: &[f64], category: FlowCategory, forward: SolveResult, backward: Option<SolveResult>) -> FlowOutcome {
        FlowOutcome { result: x.to_vec(), category, forward: Some(forward), backward }
    }

    /// One application of `ψ_rev`.
    pub fn psi_rev(&self, x: &[f64]) -> FlowOutcome {
        let d = self.scheme.state_dim();
        let k = self.scheme.chain_len();
        let fwd = self.solver.solve(&self.scheme, x);
        if !fwd.converged() {
            return Self::rejected(x, FlowCategory::ForwardFail, fwd, None);
        }
        let mut start = vec![0.0; d];
        self.involution.apply(&fwd.chain[(k - 1) * d..], &mut start);
        let bwd = self.solver.solve(&self.scheme, &start);
        if !bwd.converged() {
            return Self::rejected(x, FlowCategory::BackwardFail, fwd, Some(bwd));
        }
        let err = self.chain_mismatch(x, &fwd.chain, &bwd.chain);
        let thr = self.rev.eta_rev * linalg::norm(x).max(SCALE_FLOOR);
        if !(err < thr) {
            return Self::rejected(x, FlowCategory::ReversibilityFail, fwd, Some(bwd));
        }
        FlowOutcome { result: start, category: FlowCategory::Accepted, forward: Some(fwd), backward: Some(bwd) }
    }

    /// `S(φ(x))` without the backward check; the identity when the forward
    /// solve fails. Not an involution in general.
    pub fn psi_fwd(&self, x: &[f64]) -> FlowOutcome {
        let d = self.scheme.state_dim();
        let k = self.scheme.chain_len();
        let fwd = self.solver.solve(&self.scheme, x);
        if !fwd.converged() {
            return Self::rejected(x, FlowCategory::ForwardFail, fwd, None);
        }
        let mut result = vec![0.0; d];
        self.involution.apply(&fwd.chain[(k - 1) * d..], &mut result);
        FlowOutcome { result, category: FlowCategory::Accepted, forward: Some(fwd), backward: None }
    }

    /// Distance between the backward chain `(ȳ_1, ..., ȳ_k)` and
    /// `(S ỹ_{k-1}, ..., S ỹ_1, S x)`.
    fn chain_mismatch(&self, x: &[f64], fwd: &[f64], bwd: &[f64]) -> f64 {
        let d = self.scheme.state_dim();
        let k = self.scheme.chain_len();
        let mut target = vec![0.0; d];
        let mut sum = 0.0;
        for j in 1..=k {
            let src = if j < k { &fwd[(k - 1 - j) * d..(k - j) * d] } else { x };
            let got = &bwd[(j - 1) * d..j * d];
            let compare = match self.rev.check_mode {
                CheckMode::FullChain => 0..d,
                CheckMode::PositionOnly if j == k => 0..self.involution.split,
                CheckMode::PositionOnly if self.rev.check_intermediate => 0..d,
                CheckMode::PositionOnly => continue,
            };
            self.involution.apply(src, &mut target);
            sum += compare.map(|i| (got[i] - target[i]).powi(2)).sum::<f64>();
        }
        sum.sqrt()
    }
}

/// Per-category rejection counts over a run.
///
/// Every step lands in exactly one of: forward failure, backward failure,
/// reversibility failure, Metropolis rejection, or acceptance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub steps: u64,
    pub forward: u64,
    pub backward: u64,
    pub reversibility: u64,
    pub mh: u64,
    /// Sum over steps of the Metropolis rejection probability
    /// `1 - min(1, acceptance ratio)`; an unbiased, lower-variance estimate
    /// of the Metropolis rejection rate.
    pub mh_reject_prob_sum: f64,
}

/// Rejection rates in percent of all steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionRates {
    pub forward: f64,
    pub backward: f64,
    pub srev: f64,
    pub mh: f64,
    pub global: f64,
}

impl RejectionStats {
    pub fn record(&mut self, category: FlowCategory, mh_rejected: bool, mh_reject_prob: f64) {
        self.steps += 1;
        match category {
            FlowCategory::ForwardFail => self.forward += 1,
            FlowCategory::BackwardFail => self.backward += 1,
            FlowCategory::ReversibilityFail => self.reversibility += 1,
            FlowCategory::Accepted => {
                if mh_rejected {
                    self.mh += 1;
                }
                self.mh_reject_prob_sum += mh_reject_prob;
            }
        }
    }

    pub fn merge(&mut self, other: &RejectionStats) {
        self.steps += other.steps;
        self.forward += other.forward;
        self.backward += other.backward;
        self.reversibility += other.reversibility;
        self.mh += other.mh;
        self.mh_reject_prob_sum += other.mh_reject_prob_sum;
    }

    pub fn rejected(&self) -> u64 {
        self.forward + self.backward + self.reversibility + self.mh
    }

    pub fn rates(&self) -> RejectionRates {
        if self.steps == 0 {
            return RejectionRates::default();
        }
        let pct = |c: u64| 100.0 * c as f64 / self.steps as f64;
        RejectionRates {
            forward: pct(self.forward),
            backward: pct(self.backward),
            srev: pct(self.reversibility),
            mh: pct(self.mh),
            global: pct(self.rejected()),
        }
    }

    /// Metropolis rejection rate in percent, from the averaged rejection
    /// probabilities rather than the realized rejections.
    pub fn mh_rate_expected(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            100.0 * self.mh_reject_prob_sum / self.steps as f64
        }
    }
}

/// Tallies a stream of flow categories with Metropolis rejection flags.
pub fn classify_run<I: IntoIterator<Item = (FlowCategory, bool)>>(outcomes: I) -> RejectionStats {
    let mut stats = RejectionStats::default();
    for (c, rejected) in outcomes {
        stats.record(c, rejected, if rejected { 1.0 } else { 0.0 });
    }
    stats
}
