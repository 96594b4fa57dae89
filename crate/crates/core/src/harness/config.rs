//! Experiment configuration: a TOML file layered over per-experiment
//! defaults, plus `key=value` overrides.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Anisotropic, Circle, ConstantDiffusion, CosineSquared, DiffusionField, DoubleWell, OnePlusSquare, Potential,
    Quadratic, RmhmcHamiltonian,
};
use crate::revflow::{CheckMode, RevConfig};
use crate::samplers::{FdUpdate, KernelConfig, KernelKind};
use crate::solvers::{Solver, SolverBackend, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DoublewellHistogram,
    RejectionSweep,
    CircleTv,
    DriftTest,
    GhmalaGaussian,
    InvariantSuite,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::DoublewellHistogram,
        ExperimentKind::RejectionSweep,
        ExperimentKind::CircleTv,
        ExperimentKind::DriftTest,
        ExperimentKind::GhmalaGaussian,
        ExperimentKind::InvariantSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DoublewellHistogram => "doublewell_histogram",
            ExperimentKind::RejectionSweep => "rejection_sweep",
            ExperimentKind::CircleTv => "circle_tv",
            ExperimentKind::DriftTest => "drift_test",
            ExperimentKind::GhmalaGaussian => "ghmala_gaussian",
            ExperimentKind::InvariantSuite => "invariant_suite",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    DoubleWell { sigma: f64, height: f64 },
    Circle { stiffness: f64 },
    /// `½ scale |q|²`.
    Quadratic { dim: usize, scale: f64 },
}

impl PotentialSpec {
    pub fn build(&self) -> Result<Arc<dyn Potential>> {
        Ok(match *self {
            PotentialSpec::DoubleWell { sigma, height } => {
                if !(sigma > 0.0) {
                    return Err(Error::Config("double_well.sigma must be positive".into()));
                }
                Arc::new(DoubleWell { sigma, height })
            }
            PotentialSpec::Circle { stiffness } => Arc::new(Circle { stiffness }),
            PotentialSpec::Quadratic { dim, scale } => {
                if dim == 0 {
                    return Err(Error::Config("quadratic.dim must be at least 1".into()));
                }
                Arc::new(Quadratic::isotropic(dim, scale))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    /// `scale · I`.
    Constant { dim: usize, scale: f64 },
    /// `(1 + eps) I`.
    Isotropic { dim: usize, eps: f64 },
    /// `1 + q²` in one dimension.
    OnePlusSquare,
    /// `((offset + cos πq) / 2)²` in one dimension.
    CosineSquared { offset: f64 },
    /// `eps I + t tᵀ` with `t` the unit tangent to circles around the origin.
    Anisotropic { dim: usize, eps: f64 },
}

impl DiffusionSpec {
    pub fn build(&self) -> Result<Arc<dyn DiffusionField>> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        Ok(match *self {
            DiffusionSpec::Constant { dim, scale } => {
                positive("constant.scale", scale)?;
                Arc::new(ConstantDiffusion::scalar(dim, scale))
            }
            DiffusionSpec::Isotropic { dim, eps } => {
                positive("isotropic.eps", eps)?;
                Arc::new(ConstantDiffusion::isotropic(dim, eps))
            }
            DiffusionSpec::OnePlusSquare => Arc::new(OnePlusSquare),
            DiffusionSpec::CosineSquared { offset } => {
                if !(offset > 1.0) {
                    return Err(Error::Config("cosine_squared.offset must exceed 1".into()));
                }
                Arc::new(CosineSquared { offset })
            }
            DiffusionSpec::Anisotropic { dim, eps } => {
                positive("anisotropic.eps", eps)?;
                Arc::new(Anisotropic { dim, eps })
            }
        })
    }

    /// Short label used in output file names.
    pub fn label(&self) -> &'static str {
        match self {
            DiffusionSpec::Constant { .. } => "constant",
            DiffusionSpec::Isotropic { .. } => "iso",
            DiffusionSpec::OnePlusSquare => "one_plus_square",
            DiffusionSpec::CosineSquared { .. } => "cosine_squared",
            DiffusionSpec::Anisotropic { .. } => "aniso",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub potential: PotentialSpec,
    pub diffusion: DiffusionSpec,
}

impl ModelSpec {
    pub fn build(&self) -> Result<RmhmcHamiltonian> {
        Ok(RmhmcHamiltonian::new(self.potential.build()?, self.diffusion.build()?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Gsv,
    Imr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub backend: SolverBackend,
    pub eta_newton: f64,
    pub eta_newton_tilde: f64,
    pub n_newton: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_rel_threshold: Option<f64>,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub cert_tol: f64,
}

impl SolverSection {
    pub fn new(backend: SolverBackend, c: SolverConfig) -> Self {
        SolverSection {
            backend,
            eta_newton: c.eta,
            eta_newton_tilde: c.eta_step,
            n_newton: c.max_newton_iter,
            rank_rel_threshold: c.rank_rel,
            fp_tol: c.fp_tol,
            fp_max_iter: c.fp_max_iter,
            cert_tol: c.cert_tol,
        }
    }

    pub fn config(&self) -> SolverConfig {
        SolverConfig {
            eta: self.eta_newton,
            eta_step: self.eta_newton_tilde,
            max_newton_iter: self.n_newton,
            rank_rel: self.rank_rel_threshold,
            fp_tol: self.fp_tol,
            fp_max_iter: self.fp_max_iter,
            cert_tol: self.cert_tol,
        }
    }

    pub fn solver(&self) -> Solver {
        Solver::new(self.backend, self.config())
    }
}

/// Reversibility check settings. An unset `check_mode` resolves to
/// `position_only` for GSV and `full_chain` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevSection {
    pub eta_rev: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check_mode: Option<CheckMode>,
    pub check_intermediate: bool,
}

impl RevSection {
    pub fn resolve(&self, scheme: SchemeKind) -> RevConfig {
        let check_mode = self.check_mode.unwrap_or(match scheme {
            SchemeKind::Gsv => CheckMode::PositionOnly,
            SchemeKind::Imr => CheckMode::FullChain,
        });
        RevConfig { eta_rev: self.eta_rev, check_mode, check_intermediate: self.check_intermediate }
    }
}

/// Step-size grid: `n` log-spaced points on `[min, max]` plus `extra`
/// values, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
    pub extra: Vec<f64>,
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min > 0.0 && self.max >= self.min) {
            return Err(Error::Config(format!("invalid step grid [{}, {}]", self.min, self.max)));
        }
        let mut v = if self.n == 0 { Vec::new() } else { crate::diagnostics::log_grid(self.min, self.max, self.n) };
        v.extend(&self.extra);
        if v.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSection {
    pub lo: f64,
    pub hi: f64,
    /// Simpson panels per bin for the reference density.
    pub quadrature_panels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: GridSpec,
    /// Range of the log-log fit of the MH rejection rate.
    pub slope_min: f64,
    pub slope_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleSection {
    pub grid: GridSpec,
    pub kernels: Vec<KernelKind>,
    pub diffusions: Vec<DiffusionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    pub points: Vec<Vec<f64>>,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhmalaSection {
    /// Batches for the batch-means standard errors.
    pub n_batches: usize,
    pub q0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    pub symplectic_dts: Vec<f64>,
    pub symplectic_points: usize,
    pub involution_dts: Vec<f64>,
    pub involution_points: usize,
    pub agreement_dt: f64,
    pub agreement_points: usize,
    pub degeneracy_dt: f64,
    pub degeneracy_steps: usize,
    /// Positions of random test points are drawn uniformly from
    /// `[-q_range, q_range]^m`.
    pub q_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub n_iter: u64,
    pub n_realizations: usize,
    pub n_bins: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Starting position of every chain, where the experiment has a fixed one.
    pub q0: Vec<f64>,
    pub model: ModelSpec,
    pub scheme: SchemeKind,
    pub kernel: KernelConfig,
    pub solver: SolverSection,
    pub rev: RevSection,
    pub histogram: HistogramSection,
    pub sweep: SweepSection,
    pub circle: CircleSection,
    pub drift: DriftSection,
    pub ghmala: GhmalaSection,
    pub invariants: InvariantSection,
}

fn double_well_model() -> ModelSpec {
    ModelSpec {
        potential: PotentialSpec::DoubleWell { sigma: 0.2, height: 1.0 },
        diffusion: DiffusionSpec::CosineSquared { offset: 1.5 },
    }
}

impl ExperimentConfig {
    /// Defaults for `kind`, sized to run in minutes.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            experiment: kind,
            seed: 1,
            n_iter: 200_000,
            n_realizations: 1,
            n_bins: 200,
            output_dir: None,
            q0: vec![-0.5],
            model: double_well_model(),
            scheme: SchemeKind::Gsv,
            kernel: KernelConfig {
                kind: KernelKind::Ghmc,
                dt: 0.15,
                gamma: 1.0,
                fd_update: FdUpdate::Midpoint,
                mala_dt: None,
            },
            solver: SolverSection::new(SolverBackend::NewtonSequential, SolverConfig::default()),
            rev: RevSection { eta_rev: 1e-8, check_mode: None, check_intermediate: false },
            histogram: HistogramSection { lo: -2.0, hi: 2.0, quadrature_panels: 16 },
            sweep: SweepSection {
                grid: GridSpec { min: 0.01, max: 10.0, n: 25, extra: vec![0.15, 0.69, 1.08] },
                slope_min: 0.02,
                slope_max: 0.1,
            },
            circle: CircleSection {
                grid: GridSpec { min: 0.01, max: 2.0, n: 16, extra: vec![] },
                kernels: vec![KernelKind::Hmc, KernelKind::Ghmc],
                diffusions: vec![
                    DiffusionSpec::Isotropic { dim: 2, eps: 0.1 },
                    DiffusionSpec::Anisotropic { dim: 2, eps: 0.1 },
                ],
            },
            drift: DriftSection { points: vec![vec![0.0], vec![0.5], vec![1.0]], n_samples: 1_000_000 },
            ghmala: GhmalaSection { n_batches: 50, q0: vec![0.0, 0.0] },
            invariants: InvariantSection {
                symplectic_dts: vec![0.01, 0.1],
                symplectic_points: 100,
                involution_dts: vec![0.05, 0.5, 1.5],
                involution_points: 1000,
                agreement_dt: 0.05,
                agreement_points: 1000,
                degeneracy_dt: 0.1,
                degeneracy_steps: 10_000,
                q_range: 1.8,
            },
        };
        match kind {
            ExperimentKind::DoublewellHistogram | ExperimentKind::RejectionSweep | ExperimentKind::InvariantSuite => {}
            ExperimentKind::CircleTv => {
                cfg.n_iter = 100_000;
                cfg.n_realizations = 50;
                cfg.n_bins = 100;
                cfg.model = ModelSpec {
                    potential: PotentialSpec::Circle { stiffness: 100.0 },
                    diffusion: DiffusionSpec::Anisotropic { dim: 2, eps: 0.1 },
                };
                cfg.q0 = vec![1.0, 0.0];
            }
            ExperimentKind::DriftTest => {
                cfg.model = ModelSpec {
                    potential: PotentialSpec::Quadratic { dim: 1, scale: 1.0 },
                    diffusion: DiffusionSpec::OnePlusSquare,
                };
                cfg.kernel.kind = KernelKind::Hmc;
                cfg.kernel.dt = 0.02;
            }
            ExperimentKind::GhmalaGaussian => {
                cfg.n_iter = 500_000;
                cfg.model = ModelSpec {
                    potential: PotentialSpec::Quadratic { dim: 2, scale: 1.0 },
                    diffusion: DiffusionSpec::Constant { dim: 2, scale: 1.0 },
                };
                cfg.kernel.kind = KernelKind::Ghmala;
                cfg.kernel.dt = 0.2;
                cfg.solver.backend = SolverBackend::Newton;
                cfg.q0 = vec![0.0, 0.0];
            }
        }
        cfg
    }

    /// Parses `text` over the preset named by its `experiment` key, then
    /// applies `key=value` overrides (dotted keys, TOML values; bare words
    /// are taken as strings).
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut user, ov)?;
        }
        let kind = match user.get("experiment") {
            Some(toml::Value::String(s)) => ExperimentKind::parse(s)?,
            Some(_) => return Err(Error::Parse("`experiment` must be a string".into())),
            None => return Err(Error::Parse("missing key `experiment`".into())),
        };
        let mut merged = toml::Table::try_from(Self::preset(kind)).expect("presets serialize");
        merge(&mut merged, user);
        let cfg: ExperimentConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
        Self::from_toml_str(&text, overrides)
    }

    /// The fully resolved configuration; parsing it back gives `self`.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn rev_config(&self) -> RevConfig {
        self.rev.resolve(self.scheme)
    }

    /// Checks every setting the chosen experiment consumes before any
    /// sampling starts.
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let rev = self.rev_config();
        if !(rev.eta_rev > 0.0) {
            return Err(Error::Config("rev.eta_rev must be positive".into()));
        }
        if rev.check_mode == CheckMode::PositionOnly && self.scheme != SchemeKind::Gsv {
            return Err(Error::Config("rev.check_mode = position_only requires the gsv scheme".into()));
        }
        let s = &self.solver.config();
        if !(s.eta > 0.0 && s.eta_step > 0.0 && s.fp_tol > 0.0 && s.cert_tol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.n_realizations == 0 {
            return Err(Error::Config("n_realizations must be at least 1".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be at least 1".into()));
        }
        let model = self.model.build()?;
        let m = crate::model::Hamiltonian::dim(&model);
        if self.model.diffusion.build()?.dim() != m {
            return Err(Error::Config("potential and diffusion dimensions differ".into()));
        }
        match self.experiment {
            ExperimentKind::DoublewellHistogram => {
                if m != 1 {
                    return Err(Error::Config("doublewell_histogram needs a one-dimensional model".into()));
                }
                if !(self.histogram.lo < self.histogram.hi) {
                    return Err(Error::Config("histogram.lo must be below histogram.hi".into()));
                }
                self.check_q0(m)?;
                self.check_hamiltonian_kernel()?;
            }
            ExperimentKind::RejectionSweep => {
                self.sweep.grid.values()?;
                self.check_q0(m)?;
                self.check_hamiltonian_kernel()?;
            }
            ExperimentKind::CircleTv => {
                self.circle.grid.values()?;
                if m != 2 {
                    return Err(Error::Config("circle_tv needs a two-dimensional model".into()));
                }
                for d in &self.circle.diffusions {
                    if d.build()?.dim() != 2 {
                        return Err(Error::Config("circle.diffusions must be two-dimensional".into()));
                    }
                }
                for k in &self.circle.kernels {
                    if *k == KernelKind::Ghmala {
                        return Err(Error::Config("circle.kernels cannot include ghmala".into()));
                    }
                }
            }
            ExperimentKind::DriftTest => {
                if self.drift.n_samples < 2 {
                    return Err(Error::Config("drift.n_samples must be at least 2".into()));
                }
                if self.drift.points.iter().any(|p| p.len() != m) {
                    return Err(Error::Config(format!("drift.points must have dimension {m}")));
                }
            }
            ExperimentKind::GhmalaGaussian => {
                if self.kernel.kind != KernelKind::Ghmala {
                    return Err(Error::Config("ghmala_gaussian needs kernel.kind = ghmala".into()));
                }
                if self.ghmala.q0.len() != m {
                    return Err(Error::Config(format!("ghmala.q0 must have dimension {m}")));
                }
                if self.ghmala.n_batches < 2 || (self.ghmala.n_batches as u64) > self.n_iter {
                    return Err(Error::Config("ghmala.n_batches must be in [2, n_iter]".into()));
                }
            }
            ExperimentKind::InvariantSuite => {
                let inv = &self.invariants;
                let dts = inv.symplectic_dts.iter().chain(&inv.involution_dts).chain([&inv.agreement_dt, &inv.degeneracy_dt]);
                for &dt in dts {
                    if !(dt > 0.0 && dt.is_finite()) {
                        return Err(Error::Config(format!("invariant step sizes must be positive, got {dt}")));
                    }
                }
                if !(inv.q_range > 0.0) {
                    return Err(Error::Config("invariants.q_range must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn check_q0(&self, m: usize) -> Result<()> {
        if self.q0.len() != m {
            return Err(Error::Config(format!("q0 must have dimension {m}, got {}", self.q0.len())));
        }
        Ok(())
    }

    fn check_hamiltonian_kernel(&self) -> Result<()> {
        if self.kernel.kind == KernelKind::Ghmala {
            return Err(Error::Config(format!("{} needs an hmc or ghmc kernel", self.experiment.name())));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            // Tagged model entries are replaced whole so that switching
            // `kind` does not inherit the other variant's fields.
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override `{ov}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Parse(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Parse(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}
