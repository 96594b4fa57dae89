//! The experiments, as functions from a configuration to typed results.
//!
//! Chain `i` of realization `r` draws from stream `(r << 32) | i` of the
//! configured seed, so realizations are independent and every chain is
//! reproducible on its own.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{DiffusionSpec, ExperimentConfig, ModelSpec, SchemeKind};
use super::par_map;
use crate::diagnostics::{
    analytic_density, batch_means, drift_test, mean_stderr, mh_rejection_slope, tv_distance, Binning, BinnedDensity,
    DriftEstimate, Histogram, RejectionRow,
};
use crate::error::{Error, Result};
use crate::model::{Hamiltonian, RmhmcHamiltonian, RotatedGradient};
use crate::revflow::{RejectionStats, ReversibleFlow};
use crate::samplers::{chain_rng, run_chain, ChainRng, ChainState, GhmalaKernel, HamiltonianKernel, KernelKind};
use crate::schemes::{GhmalaScheme, Gsv, Imr, Involution, Scheme};

pub type DynScheme = Box<dyn Scheme>;

/// Generator for chain `chain` of realization `realization`.
pub fn substream(seed: u64, realization: usize, chain: usize) -> ChainRng {
    chain_rng(seed, ((realization as u64) << 32) | chain as u64)
}

pub fn build_scheme(kind: SchemeKind, model: &RmhmcHamiltonian, dt: f64) -> DynScheme {
    match kind {
        SchemeKind::Gsv => Box::new(Gsv::new(model.clone(), dt)),
        SchemeKind::Imr => Box::new(Imr::new(model.clone(), dt)),
    }
}

/// The checked (or forward-only) flow of `cfg` on `model` at step `dt`.
pub fn build_flow(cfg: &ExperimentConfig, model: &RmhmcHamiltonian, dt: f64) -> Result<ReversibleFlow<DynScheme>> {
    ReversibleFlow::new(
        build_scheme(cfg.scheme, model, dt),
        Involution::momentum_reversal(model.dim()),
        cfg.solver.solver(),
        cfg.rev_config(),
    )
}

pub fn build_kernel(
    cfg: &ExperimentConfig,
    model: &RmhmcHamiltonian,
    kind: KernelKind,
    dt: f64,
) -> Result<HamiltonianKernel<DynScheme>> {
    let flow = build_flow(cfg, model, dt)?;
    HamiltonianKernel::new(model.clone(), flow, crate::samplers::KernelConfig { kind, dt, ..cfg.kernel })
}

/// `(q0, p0)` with `p0 ~ N(0, D(q0)⁻¹)` drawn from `rng`.
pub fn initial_state(model: &RmhmcHamiltonian, q0: &[f64], mut rng: ChainRng) -> Result<ChainState> {
    let m = model.dim();
    let g: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let mut x = vec![0.0; 2 * m];
    x[..m].copy_from_slice(q0);
    let (q, p) = x.split_at_mut(m);
    model.sample_momentum(q, &g, p)?;
    Ok(ChainState::new(x, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRun {
    pub kernel: KernelKind,
    pub histogram: Histogram,
    pub stats: RejectionStats,
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoublewellResult {
    pub dt: f64,
    pub analytic: BinnedDensity,
    pub checked: HistogramRun,
    pub forward_only: HistogramRun,
}

/// Position histograms of the checked kernel and its forward-only variant
/// against the exact marginal. Both chains of a realization share a stream,
/// so they coincide pathwise until the forward-only flow accepts a step the
/// check would reject.
pub fn doublewell_histogram(cfg: &ExperimentConfig) -> Result<DoublewellResult> {
    let model = cfg.model.build()?;
    let binning = Binning::uniform(cfg.histogram.lo, cfg.histogram.hi, cfg.n_bins);
    let v = model.potential().clone();
    let analytic = analytic_density(|q| v.value(&[q]), binning, cfg.histogram.quadrature_panels)?;
    let checked_kind = cfg.kernel.kind.checked();
    let fwd_kind = cfg.kernel.kind.unchecked().ok_or_else(|| Error::Config("kernel has no forward-only variant".into()))?;
    let mut runs = Vec::new();
    for kind in [checked_kind, fwd_kind] {
        let kernel = build_kernel(cfg, &model, kind, cfg.kernel.dt)?;
        let parts = par_map(cfg.n_realizations, |r| -> Result<(Histogram, RejectionStats)> {
            let mut state = initial_state(&model, &cfg.q0, substream(cfg.seed, r, 0))?;
            let mut h = Histogram::new(binning);
            run_chain(&kernel, &mut state, cfg.n_iter, |x| h.add(x[0]))?;
            Ok((h, state.stats))
        });
        let mut histogram = Histogram::new(binning);
        let mut stats = RejectionStats::default();
        for part in parts {
            let (h, s) = part?;
            histogram.merge(&h)?;
            stats.merge(&s);
        }
        let tv = tv_distance(&histogram.density(), &analytic)?;
        runs.push(HistogramRun { kernel: kind, histogram, stats, tv });
    }
    let forward_only = runs.pop().expect("two runs");
    let checked = runs.pop().expect("two runs");
    Ok(DoublewellResult { dt: cfg.kernel.dt, analytic, checked, forward_only })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kernel: KernelKind,
    pub rows: Vec<RejectionRow>,
    /// Log-log slope of the expected MH rejection rate over the fit range.
    pub mh_slope: Option<f64>,
}

/// Rejection decomposition per step size.
pub fn rejection_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let model = cfg.model.build()?;
    let grid = cfg.sweep.grid.values()?;
    let mut rows = Vec::with_capacity(grid.len());
    for (i, &dt) in grid.iter().enumerate() {
        let kernel = build_kernel(cfg, &model, cfg.kernel.kind, dt)?;
        let parts = par_map(cfg.n_realizations, |r| -> Result<RejectionStats> {
            let mut state = initial_state(&model, &cfg.q0, substream(cfg.seed, r, i))?;
            run_chain(&kernel, &mut state, cfg.n_iter, |_| {})?;
            Ok(state.stats)
        });
        let mut stats = RejectionStats::default();
        for p in parts {
            stats.merge(&p?);
        }
        rows.push(RejectionRow { dt, stats });
    }
    let mh_slope = mh_rejection_slope(&rows, cfg.sweep.slope_min, cfg.sweep.slope_max);
    Ok(SweepResult { kernel: cfg.kernel.kind, rows, mh_slope })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvPoint {
    pub dt: f64,
    pub mean_tv: f64,
    /// `None` with a single realization.
    pub stderr: Option<f64>,
    pub stats: RejectionStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvCurve {
    pub diffusion: DiffusionSpec,
    pub kernel: KernelKind,
    pub points: Vec<TvPoint>,
}

impl TvCurve {
    pub fn label(&self) -> String {
        format!("{}_{}", self.diffusion.label(), self.kernel.name())
    }

    /// The point of smallest mean TV.
    pub fn minimum(&self) -> &TvPoint {
        self.points.iter().min_by(|a, b| a.mean_tv.total_cmp(&b.mean_tv)).expect("nonempty grid")
    }
}

/// Angular total variation after `n_iter` steps, per diffusion field,
/// kernel and step size, averaged over realizations started uniformly on the
/// unit circle. Realization `r` uses the same stream for every curve and
/// step size.
pub fn circle_tv(cfg: &ExperimentConfig) -> Result<Vec<TvCurve>> {
    let grid = cfg.circle.grid.values()?;
    let binning = Binning::angular(cfg.n_bins);
    let uniform = BinnedDensity::uniform(binning);
    let mut curves = Vec::new();
    for diffusion in &cfg.circle.diffusions {
        let model = ModelSpec { potential: cfg.model.potential.clone(), diffusion: diffusion.clone() }.build()?;
        for &kind in &cfg.circle.kernels {
            let mut points = Vec::with_capacity(grid.len());
            for &dt in &grid {
                let kernel = build_kernel(cfg, &model, kind, dt)?;
                let runs = par_map(cfg.n_realizations, |r| -> Result<(f64, RejectionStats)> {
                    let mut rng = substream(cfg.seed, r, 0);
                    let theta: f64 = rng.random::<f64>() * TAU;
                    let mut state = initial_state(&model, &[theta.cos(), theta.sin()], rng)?;
                    let mut h = Histogram::new(binning);
                    run_chain(&kernel, &mut state, cfg.n_iter, |x| h.add(x[1].atan2(x[0])))?;
                    Ok((tv_distance(&h.density(), &uniform)?, state.stats))
                });
                let mut tvs = Vec::with_capacity(runs.len());
                let mut stats = RejectionStats::default();
                for run in runs {
                    let (tv, s) = run?;
                    tvs.push(tv);
                    stats.merge(&s);
                }
                let (mean_tv, stderr) = mean_stderr(&tvs);
                points.push(TvPoint { dt, mean_tv, stderr, stats });
            }
            curves.push(TvCurve { diffusion: diffusion.clone(), kernel: kind, points });
        }
    }
    Ok(curves)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftPoint {
    pub q: Vec<f64>,
    pub estimate: DriftEstimate,
}

/// Monte Carlo estimate of the second-order drift of one scheme step at
/// each configured position, with `Δt = kernel.dt`.
pub fn drift(cfg: &ExperimentConfig) -> Result<Vec<DriftPoint>> {
    let model = cfg.model.build()?;
    let scheme = build_scheme(cfg.scheme, &model, cfg.kernel.dt);
    let solver = cfg.solver.solver();
    let results = par_map(cfg.drift.points.len(), |i| -> Result<DriftPoint> {
        let q = &cfg.drift.points[i];
        let mut rng = substream(cfg.seed, 0, i);
        let estimate = drift_test(&model, &scheme, &solver, q, cfg.drift.n_samples, &mut rng)?;
        Ok(DriftPoint { q: q.clone(), estimate })
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub name: String,
    pub estimate: f64,
    pub stderr: f64,
    pub target: f64,
}

impl MomentEstimate {
    pub fn z(&self) -> f64 {
        (self.estimate - self.target).abs() / self.stderr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhmalaResult {
    pub moments: Vec<MomentEstimate>,
    /// Whether `|ξ| = 1` held exactly at every step.
    pub direction_conserved: bool,
    pub stats: RejectionStats,
}

/// GHMALA on the standard Gaussian with the rotated-gradient field: first and
/// second moments of each coordinate against 0 and 1.
pub fn ghmala_gaussian(cfg: &ExperimentConfig) -> Result<GhmalaResult> {
    let potential = cfg.model.potential.build()?;
    if potential.dim() != 2 {
        return Err(Error::Config("ghmala_gaussian needs a two-dimensional potential".into()));
    }
    let flow = ReversibleFlow::new(
        GhmalaScheme::new(RotatedGradient::planar(potential.clone()), cfg.kernel.dt),
        Involution::direction_reversal(2),
        cfg.solver.solver(),
        crate::revflow::RevConfig { check_mode: crate::revflow::CheckMode::FullChain, ..cfg.rev_config() },
    )?;
    let kernel = GhmalaKernel::new(potential, flow, cfg.kernel)?;
    let mut x = cfg.ghmala.q0.clone();
    x.push(1.0);
    let mut state = ChainState::new(x, substream(cfg.seed, 0, 0));
    let n = cfg.n_iter as usize;
    let mut series: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(n)).collect();
    let mut conserved = true;
    run_chain(&kernel, &mut state, cfg.n_iter, |x| {
        series[0].push(x[0]);
        series[1].push(x[1]);
        series[2].push(x[0] * x[0]);
        series[3].push(x[1] * x[1]);
        conserved &= x[2].abs() == 1.0;
    })?;
    let names = ["mean_q1", "mean_q2", "second_moment_q1", "second_moment_q2"];
    let targets = [0.0, 0.0, 1.0, 1.0];
    let moments = (0..4)
        .map(|k| {
            let (estimate, stderr) = batch_means(&series[k], cfg.ghmala.n_batches);
            MomentEstimate { name: names[k].to_owned(), estimate, stderr, target: targets[k] }
        })
        .collect();
    Ok(GhmalaResult { moments, direction_conserved: conserved, stats: state.stats })
}

pub(crate) fn rejection_row_values(row: &RejectionRow) -> [f64; 6] {
    let r = row.stats.rates();
    [row.dt, r.forward, r.backward, r.srev, r.mh, r.global]
}
