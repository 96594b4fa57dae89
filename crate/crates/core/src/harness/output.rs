//! Running an experiment end to end and writing its artifacts.
//!
//! Every run writes `config.resolved.toml`, the experiment's CSV tables and
//! `summary.toml` into the output directory. Column sets are fixed per file:
//!
//! | file | columns |
//! |---|---|
//! | `histogram_{checked,forward,analytic}.csv` | `bin_center, weight` |
//! | `rejection.csv` | `dt, forward, backward, srev, mh, global, mh_expected, steps` |
//! | `tv_{diffusion}_{kernel}.csv` | `dt, mean_tv, stderr, global_rejection` |
//! | `drift.csv` | `point, component, q, estimate, stderr, target, z, samples, failures` |
//! | `moments.csv` | `moment, estimate, stderr, target, z` |
//! | `invariants.csv` | `check, subject, dt, n_points, excluded, max_error, tolerance, failures, pass` |
//!
//! Rejection rates are percentages. An undefined standard error (a single
//! realization) is an empty cell.

use std::fs;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use super::config::{ExperimentConfig, ExperimentKind};
use super::experiments::{self as exp, DoublewellResult, DriftPoint, GhmalaResult, SweepResult, TvCurve};
use super::invariants::{self, InvariantRow};
use crate::diagnostics::BinnedDensity;
use crate::error::{Error, Result};
use crate::revflow::RejectionStats;

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const SUMMARY_FILE: &str = "summary.toml";

pub const HISTOGRAM_COLUMNS: [&str; 2] = ["bin_center", "weight"];
pub const REJECTION_COLUMNS: [&str; 8] = ["dt", "forward", "backward", "srev", "mh", "global", "mh_expected", "steps"];
pub const TV_COLUMNS: [&str; 4] = ["dt", "mean_tv", "stderr", "global_rejection"];
pub const DRIFT_COLUMNS: [&str; 9] = ["point", "component", "q", "estimate", "stderr", "target", "z", "samples", "failures"];
pub const MOMENT_COLUMNS: [&str; 5] = ["moment", "estimate", "stderr", "target", "z"];
pub const INVARIANT_COLUMNS: [&str; 9] =
    ["check", "subject", "dt", "n_points", "excluded", "max_error", "tolerance", "failures", "pass"];

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentOutput {
    DoublewellHistogram(DoublewellResult),
    RejectionSweep(SweepResult),
    CircleTv(Vec<TvCurve>),
    DriftTest(Vec<DriftPoint>),
    GhmalaGaussian(GhmalaResult),
    InvariantSuite(Vec<InvariantRow>),
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output: ExperimentOutput,
    pub out_dir: PathBuf,
    /// Files written, relative to `out_dir`, in write order.
    pub files: Vec<String>,
    /// Headline statistics, as written to `summary.toml`.
    pub headline: Table,
}

/// Runs the configured experiment without writing anything.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    Ok(match cfg.experiment {
        ExperimentKind::DoublewellHistogram => ExperimentOutput::DoublewellHistogram(exp::doublewell_histogram(cfg)?),
        ExperimentKind::RejectionSweep => ExperimentOutput::RejectionSweep(exp::rejection_sweep(cfg)?),
        ExperimentKind::CircleTv => ExperimentOutput::CircleTv(exp::circle_tv(cfg)?),
        ExperimentKind::DriftTest => ExperimentOutput::DriftTest(exp::drift(cfg)?),
        ExperimentKind::GhmalaGaussian => ExperimentOutput::GhmalaGaussian(exp::ghmala_gaussian(cfg)?),
        ExperimentKind::InvariantSuite => ExperimentOutput::InvariantSuite(invariants::run_all(cfg)?),
    })
}

/// Validates `cfg`, writes its resolved form to `out_dir`, runs it and writes
/// the artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut w = Writer { dir: out_dir.to_path_buf(), files: Vec::new() };
    w.text(CONFIG_FILE, &cfg.to_toml_string())?;
    let output = execute(cfg)?;
    let mut headline = Table::new();
    headline.insert("experiment".into(), cfg.experiment.name().into());
    headline.insert("seed".into(), Value::Integer(cfg.seed as i64));
    match &output {
        ExperimentOutput::DoublewellHistogram(r) => write_histograms(&mut w, &mut headline, r)?,
        ExperimentOutput::RejectionSweep(r) => write_sweep(&mut w, &mut headline, r)?,
        ExperimentOutput::CircleTv(r) => write_circle(&mut w, &mut headline, r)?,
        ExperimentOutput::DriftTest(r) => write_drift(&mut w, &mut headline, r)?,
        ExperimentOutput::GhmalaGaussian(r) => write_moments(&mut w, &mut headline, r)?,
        ExperimentOutput::InvariantSuite(r) => write_invariants(&mut w, &mut headline, r)?,
    }
    let summary = toml::to_string(&headline).map_err(|e| Error::Parse(e.to_string()))?;
    w.text(SUMMARY_FILE, &summary)?;
    Ok(RunSummary { output, out_dir: out_dir.to_path_buf(), files: w.files, headline })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let path = self.dir.join(name);
        let mut out = csv::Writer::from_path(&path)?;
        out.write_record(header)?;
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_owned());
        Ok(())
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn put(t: &mut Table, key: &str, x: f64) {
    t.insert(key.into(), Value::Float(x));
}

fn stats_table(s: &RejectionStats) -> Table {
    let r = s.rates();
    let mut t = Table::new();
    t.insert("steps".into(), Value::Integer(s.steps as i64));
    put(&mut t, "forward", r.forward);
    put(&mut t, "backward", r.backward);
    put(&mut t, "srev", r.srev);
    put(&mut t, "mh", r.mh);
    put(&mut t, "global", r.global);
    put(&mut t, "mh_expected", s.mh_rate_expected());
    t
}

fn density_rows(d: &BinnedDensity) -> impl Iterator<Item = Vec<String>> + '_ {
    d.weights.iter().enumerate().map(|(i, w)| vec![num(d.binning.center(i)), num(*w)])
}

fn write_histograms(w: &mut Writer, t: &mut Table, r: &DoublewellResult) -> Result<()> {
    w.csv("histogram_checked.csv", &HISTOGRAM_COLUMNS, density_rows(&r.checked.histogram.density()))?;
    w.csv("histogram_forward.csv", &HISTOGRAM_COLUMNS, density_rows(&r.forward_only.histogram.density()))?;
    w.csv("histogram_analytic.csv", &HISTOGRAM_COLUMNS, density_rows(&r.analytic))?;
    put(t, "dt", r.dt);
    for (key, run) in [("checked", &r.checked), ("forward_only", &r.forward_only)] {
        let mut s = stats_table(&run.stats);
        put(&mut s, "tv", run.tv);
        s.insert("kernel".into(), run.kernel.name().into());
        s.insert("clamped".into(), Value::Integer(run.histogram.clamped as i64));
        t.insert(key.into(), Value::Table(s));
    }
    Ok(())
}

fn write_sweep(w: &mut Writer, t: &mut Table, r: &SweepResult) -> Result<()> {
    w.csv(
        "rejection.csv",
        &REJECTION_COLUMNS,
        r.rows.iter().map(|row| {
            let mut v: Vec<String> = exp::rejection_row_values(row).iter().map(|x| num(*x)).collect();
            v.push(num(row.stats.mh_rate_expected()));
            v.push(row.stats.steps.to_string());
            v
        }),
    )?;
    t.insert("kernel".into(), r.kernel.name().into());
    t.insert("mh_slope".into(), r.mh_slope.map_or(Value::String("undefined".into()), Value::Float));
    t.insert("grid".into(), Value::Array(r.rows.iter().map(|row| Value::Float(row.dt)).collect()));
    Ok(())
}

fn write_circle(w: &mut Writer, t: &mut Table, curves: &[TvCurve]) -> Result<()> {
    for c in curves {
        w.csv(
            &format!("tv_{}.csv", c.label()),
            &TV_COLUMNS,
            c.points.iter().map(|p| vec![num(p.dt), num(p.mean_tv), opt(p.stderr), num(p.stats.rates().global)]),
        )?;
        let min = c.minimum();
        let mut s = Table::new();
        put(&mut s, "min_tv", min.mean_tv);
        s.insert("min_tv_stderr".into(), min.stderr.map_or(Value::String("undefined".into()), Value::Float));
        put(&mut s, "argmin_dt", min.dt);
        t.insert(c.label(), Value::Table(s));
    }
    if let Some(c) = curves.first() {
        t.insert("grid".into(), Value::Array(c.points.iter().map(|p| Value::Float(p.dt)).collect()));
    }
    Ok(())
}

fn write_drift(w: &mut Writer, t: &mut Table, points: &[DriftPoint]) -> Result<()> {
    let mut rows = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let e = &p.estimate;
        for k in 0..p.q.len() {
            let z = (e.estimate[k] - e.target[k]).abs() / e.stderr[k];
            rows.push(vec![
                i.to_string(),
                k.to_string(),
                num(p.q[k]),
                num(e.estimate[k]),
                num(e.stderr[k]),
                num(e.target[k]),
                num(z),
                e.samples.to_string(),
                e.failures.to_string(),
            ]);
        }
    }
    w.csv("drift.csv", &DRIFT_COLUMNS, rows)?;
    let max_z = points.iter().map(|p| p.estimate.max_z()).fold(0.0, f64::max);
    put(t, "max_z", max_z);
    let failure_rate = points.iter().map(|p| p.estimate.failure_rate()).fold(0.0, f64::max);
    put(t, "max_failure_rate", failure_rate);
    Ok(())
}

fn write_moments(w: &mut Writer, t: &mut Table, r: &GhmalaResult) -> Result<()> {
    w.csv(
        "moments.csv",
        &MOMENT_COLUMNS,
        r.moments.iter().map(|m| vec![m.name.clone(), num(m.estimate), num(m.stderr), num(m.target), num(m.z())]),
    )?;
    put(t, "max_z", r.moments.iter().map(|m| m.z()).fold(0.0, f64::max));
    t.insert("direction_conserved".into(), Value::Boolean(r.direction_conserved));
    t.insert("rejection".into(), Value::Table(stats_table(&r.stats)));
    Ok(())
}

fn write_invariants(w: &mut Writer, t: &mut Table, rows: &[InvariantRow]) -> Result<()> {
    w.csv(
        "invariants.csv",
        &INVARIANT_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.check.to_owned(),
                r.subject.clone(),
                num(r.dt),
                r.n_points.to_string(),
                r.excluded.to_string(),
                num(r.max_error),
                num(r.tolerance),
                r.failures.to_string(),
                r.pass().to_string(),
            ]
        }),
    )?;
    let failed: Vec<Value> =
        rows.iter().filter(|r| !r.pass()).map(|r| Value::String(format!("{} {} dt={}", r.check, r.subject, r.dt))).collect();
    t.insert("all_pass".into(), Value::Boolean(failed.is_empty()));
    t.insert("failed".into(), Value::Array(failed));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: &str, extra: &[&str]) -> ExperimentConfig {
        let ov: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::from_toml_str(&format!("experiment = \"{kind}\"\n"), &ov).unwrap()
    }

    fn header(path: &Path) -> Vec<String> {
        let mut r = csv::Reader::from_path(path).unwrap();
        r.headers().unwrap().iter().map(str::to_owned).collect()
    }

    fn small_invariants() -> ExperimentConfig {
        small(
            "invariant_suite",
            &[
                "invariants.symplectic_points=3",
                "invariants.involution_points=5",
                "invariants.agreement_points=5",
                "invariants.degeneracy_steps=20",
            ],
        )
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let cfg = small_invariants();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        assert_eq!(ra.files, vec![CONFIG_FILE, "invariants.csv", SUMMARY_FILE]);
        for f in &ra.files {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let back = ExperimentConfig::from_file(&a.path().join(CONFIG_FILE), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn csv_schemas_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        run_experiment(&small("doublewell_histogram", &["n_iter=200", "n_bins=8"]), &d.join("h")).unwrap();
        for f in ["histogram_checked.csv", "histogram_forward.csv", "histogram_analytic.csv"] {
            assert_eq!(header(&d.join("h").join(f)), ["bin_center", "weight"]);
        }
        run_experiment(&small("rejection_sweep", &["n_iter=50", "sweep.grid.n=2", "sweep.grid.extra=[]"]), &d.join("r"))
            .unwrap();
        assert_eq!(
            header(&d.join("r/rejection.csv")),
            ["dt", "forward", "backward", "srev", "mh", "global", "mh_expected", "steps"]
        );
        run_experiment(
            &small("circle_tv", &["n_iter=50", "n_realizations=2", "circle.grid.n=2", "circle.kernels=[\"hmc\"]"]),
            &d.join("c"),
        )
        .unwrap();
        for label in ["iso_hmc", "aniso_hmc"] {
            assert_eq!(header(&d.join(format!("c/tv_{label}.csv"))), ["dt", "mean_tv", "stderr", "global_rejection"]);
        }
        run_experiment(&small("drift_test", &["drift.n_samples=50"]), &d.join("d")).unwrap();
        assert_eq!(
            header(&d.join("d/drift.csv")),
            ["point", "component", "q", "estimate", "stderr", "target", "z", "samples", "failures"]
        );
        run_experiment(&small("ghmala_gaussian", &["n_iter=500", "ghmala.n_batches=5"]), &d.join("g")).unwrap();
        assert_eq!(header(&d.join("g/moments.csv")), ["moment", "estimate", "stderr", "target", "z"]);
        run_experiment(&small_invariants(), &d.join("i")).unwrap();
        assert_eq!(
            header(&d.join("i/invariants.csv")),
            ["check", "subject", "dt", "n_points", "excluded", "max_error", "tolerance", "failures", "pass"]
        );
    }

    #[test]
    fn single_realization_has_undefined_stderr() {
        let cfg = small("circle_tv", &["n_iter=50", "n_realizations=1", "circle.grid.n=2", "circle.kernels=[\"ghmc\"]"]);
        let ExperimentOutput::CircleTv(curves) = execute(&cfg).unwrap() else { panic!("wrong output") };
        assert!(curves.iter().flat_map(|c| &c.points).all(|p| p.stderr.is_none()));
        let cfg = small("circle_tv", &["n_iter=50", "n_realizations=3", "circle.grid.n=2", "circle.kernels=[\"ghmc\"]"]);
        let ExperimentOutput::CircleTv(curves) = execute(&cfg).unwrap() else { panic!("wrong output") };
        assert!(curves.iter().flat_map(|c| &c.points).all(|p| p.stderr.is_some()));
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let mut cfg = small("drift_test", &[]);
        cfg.kernel.dt = -1.0;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_experiment(&cfg, &dir.path().join("x")), Err(Error::Config(_))));
        assert!(!dir.path().join("x").exists());
    }
}
