//! Histograms, total variation, drift and rejection-rate statistics.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hamiltonian, RmhmcHamiltonian};
use crate::revflow::RejectionStats;
use crate::samplers::{run_chain, ChainRng, ChainState, Kernel};
use crate::schemes::Scheme;
use crate::solvers::Solver;

/// Equal-width bins on `[lo, hi)`. Periodic binnings wrap values into the
/// interval; the others clamp outliers into the edge bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub periodic: bool,
}

impl Binning {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Self {
        assert!(lo < hi && n > 0, "empty binning");
        Binning { lo, hi, n, periodic: false }
    }

    /// `n` bins on `[0, 2π)`.
    pub fn angular(n: usize) -> Self {
        Binning { periodic: true, ..Binning::uniform(0.0, TAU, n) }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    /// Bin of `x` and whether it had to be clamped.
    pub fn index(&self, x: f64) -> (usize, bool) {
        let x = if self.periodic { self.lo + (x - self.lo).rem_euclid(self.hi - self.lo) } else { x };
        let t = ((x - self.lo) / self.width()).floor();
        if t < 0.0 {
            (0, true)
        } else if t >= self.n as f64 {
            // rem_euclid can round up to the period itself
            (self.n - 1, !self.periodic)
        } else {
            (t as usize, false)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub binning: Binning,
    pub counts: Vec<u64>,
    /// Samples that fell outside a non-periodic range.
    pub clamped: u64,
}

impl Histogram {
    pub fn new(binning: Binning) -> Self {
        Histogram { binning, counts: vec![0; binning.n], clamped: 0 }
    }

    pub fn add(&mut self, x: f64) {
        let (i, clamped) = self.binning.index(x);
        self.counts[i] += 1;
        self.clamped += clamped as u64;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.binning != other.binning {
            return Err(Error::Config("cannot merge histograms with different binnings".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.clamped += other.clamped;
        Ok(())
    }

    pub fn density(&self) -> BinnedDensity {
        BinnedDensity::from_masses(self.binning, self.counts.iter().map(|&c| c as f64).collect())
    }
}

/// Piecewise-constant density with `width · Σ weights = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedDensity {
    pub binning: Binning,
    pub weights: Vec<f64>,
}

impl BinnedDensity {
    /// Normalizes nonnegative bin masses. An all-zero input stays zero.
    pub fn from_masses(binning: Binning, masses: Vec<f64>) -> Self {
        assert_eq!(masses.len(), binning.n);
        let total: f64 = masses.iter().sum();
        let scale = if total > 0.0 { 1.0 / (total * binning.width()) } else { 0.0 };
        BinnedDensity { binning, weights: masses.into_iter().map(|m| m * scale).collect() }
    }

    pub fn uniform(binning: Binning) -> Self {
        Self::from_masses(binning, vec![1.0; binning.n])
    }

    /// Probability of bin `i`.
    pub fn mass(&self, i: usize) -> f64 {
        self.weights[i] * self.binning.width()
    }
}

/// `½ · width · Σ |a_i - b_i|`.
pub fn tv_distance(a: &BinnedDensity, b: &BinnedDensity) -> Result<f64> {
    if a.binning != b.binning {
        return Err(Error::Config("total variation needs identical binnings".into()));
    }
    let s: f64 = a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum();
    Ok(0.5 * a.binning.width() * s)
}

/// Bin masses of `Z⁻¹ e^{-V}` by composite Simpson quadrature with `panels`
/// (even) subintervals per bin.
pub fn analytic_density(v: impl Fn(f64) -> f64, binning: Binning, panels: usize) -> Result<BinnedDensity> {
    let panels = panels.max(2) + panels % 2;
    let w = binning.width();
    let h = w / panels as f64;
    let lo = binning.lo;
    let vals: Vec<f64> = (0..=binning.n * panels).map(|k| v(lo + k as f64 * h)).collect();
    if let Some(k) = vals.iter().position(|x| !x.is_finite()) {
        return Err(Error::Config(format!("potential is not finite at {}", lo + k as f64 * h)));
    }
    let vmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let masses = (0..binning.n)
        .map(|b| {
            let f = |k: usize| (vmin - vals[b * panels + k]).exp();
            let inner: f64 = (1..panels).map(|k| if k % 2 == 1 { 4.0 * f(k) } else { 2.0 * f(k) }).sum();
            h / 3.0 * (f(0) + inner + f(panels))
        })
        .collect();
    Ok(BinnedDensity::from_masses(binning, masses))
}

/// Sample mean and standard error; the error is `None` for fewer than two
/// values.
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Mean of a correlated series and its batch-means standard error over
/// `n_batches` contiguous batches; a remainder shorter than a batch is
/// dropped from the error estimate.
pub fn batch_means(values: &[f64], n_batches: usize) -> (f64, f64) {
    assert!(n_batches >= 2 && values.len() >= n_batches, "need at least two nonempty batches");
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let len = values.len() / n_batches;
    let batches: Vec<f64> = values.chunks_exact(len).take(n_batches).map(|c| c.iter().sum::<f64>() / len as f64).collect();
    (mean, mean_stderr(&batches).1.expect("two or more batches"))
}

/// Standard error of a Bernoulli frequency `p` over `n` trials.
pub fn binomial_stderr(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Least-squares slope of `ln y` against `ln x`, skipping nonpositive pairs.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `n` points evenly spaced in `ln` on `[lo, hi]`, with exact endpoints.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut v: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    v[0] = lo;
    v[n - 1] = hi;
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftEstimate {
    /// Monte Carlo estimate of `2 E[q¹ - q] / Δt²`.
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `-D ∇V + div D` at `q`.
    pub target: Vec<f64>,
    pub samples: u64,
    pub failures: u64,
}

impl DriftEstimate {
    /// Largest deviation from the target in standard errors.
    pub fn max_z(&self) -> f64 {
        self.estimate
            .iter()
            .zip(&self.target)
            .zip(&self.stderr)
            .map(|((e, t), s)| if *s > 0.0 { (e - t).abs() / s } else if e == t { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.samples as f64
    }
}

/// `-D(q) ∇V(q) + div D(q)`.
pub fn drift_target(model: &RmhmcHamiltonian, q: &[f64]) -> Vec<f64> {
    let m = model.dim();
    let mut d = vec![0.0; m * m];
    let mut g = vec![0.0; m];
    let mut div = vec![0.0; m];
    model.diffusion().eval(q, &mut d);
    model.potential().gradient(q, &mut g);
    model.diffusion().divergence(q, &mut div);
    (0..m).map(|i| div[i] - (0..m).map(|j| d[i * m + j] * g[j]).sum::<f64>()).collect()
}

/// Estimates the second-order drift of one step of `scheme` from `q` with
/// momenta drawn from `N(0, D(q)⁻¹)`. Failed solves are excluded and counted.
pub fn drift_test<S: Scheme>(
    model: &RmhmcHamiltonian,
    scheme: &S,
    solver: &Solver,
    q: &[f64],
    n_samples: u64,
    rng: &mut ChainRng,
) -> Result<DriftEstimate> {
    let m = model.dim();
    let dt = scheme.dt();
    let mut x = vec![0.0; 2 * m];
    x[..m].copy_from_slice(q);
    let mut g = vec![0.0; m];
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut failures = 0;
    for _ in 0..n_samples {
        for v in g.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        model.sample_momentum(q, &g, &mut x[m..])?;
        let res = solver.solve(scheme, &x);
        let Some(chain) = res.solution() else {
            failures += 1;
            continue;
        };
        let last = &chain[chain.len() - 2 * m..];
        for i in 0..m {
            let y = 2.0 * (last[i] - q[i]) / (dt * dt);
            sum[i] += y;
            sum_sq[i] += y * y;
        }
    }
    let n = (n_samples - failures) as f64;
    let estimate: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr = (0..m).map(|i| ((sum_sq[i] / n - estimate[i].powi(2)).max(0.0) * n / (n - 1.0) / n).sqrt()).collect();
    Ok(DriftEstimate { estimate, stderr, target: drift_target(model, q), samples: n_samples, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub dt: f64,
    pub stats: RejectionStats,
}

/// Runs one chain of `steps` per step size. The chain for grid index `i`
/// draws from `rng_for(i)`.
pub fn rejection_sweep<K: Kernel>(
    grid: &[f64],
    steps: u64,
    x0: &[f64],
    make_kernel: impl Fn(f64) -> Result<K>,
    rng_for: impl Fn(usize) -> ChainRng,
) -> Result<Vec<RejectionRow>> {
    grid.iter()
        .enumerate()
        .map(|(i, &dt)| {
            let kernel = make_kernel(dt)?;
            let mut state = ChainState::new(x0.to_vec(), rng_for(i));
            run_chain(&kernel, &mut state, steps, |_| {})?;
            Ok(RejectionRow { dt, stats: state.stats })
        })
        .collect()
}

/// Log-log slope of the expected MH rejection rate over rows with `dt` in
/// `[lo, hi]`.
pub fn mh_rejection_slope(rows: &[RejectionRow], lo: f64, hi: f64) -> Option<f64> {
    let sel: Vec<&RejectionRow> = rows.iter().filter(|r| r.dt >= lo && r.dt <= hi).collect();
    let xs: Vec<f64> = sel.iter().map(|r| r.dt).collect();
    let ys: Vec<f64> = sel.iter().map(|r| r.stats.mh_rate_expected()).collect();
    loglog_slope(&xs, &ys)
}
