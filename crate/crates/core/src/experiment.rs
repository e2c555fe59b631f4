//! Experiment configuration, figure presets, runners and verification suites.
//!
//! Everything the command-line tool does goes through here, so the same runs
//! can be driven from tests or other programs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admissibility::{check_admissibility, AdmissibilityReport};
use crate::analysis::{
    detect_settling, equivalence_with_q, perturbation_experiment, slack_sweep, EquivalenceReport,
    PerturbationRow, SettlingReport, SlackSweepSpec, SweepReport,
};
use crate::dynamics::{simulate_differentiator, AnyLaw, BaseLaw, MonitorSpec, MonitoredLaw, Trajectory};
use crate::error::{Error, Result};
use crate::family::CorrectionFamily;
use crate::redesign::{Redesign, RedesignParams};
use crate::signals::{make_preset, membership_warning, Measurement, NoiseSpec, SignalTerm, TestSignal};

/// Base correction family as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// Gains from explicit `gains`, from `roots` (pairs `[re, im]`), or the
    /// default all-roots-at-`−(n+1)` choice.
    Linear {
        r: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gains: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        roots: Option<Vec<[f64; 2]>>,
    },
    Levant {
        bound: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gains: Option<Vec<f64>>,
    },
    Seeber { bound: f64, t_star: f64 },
    Menard {
        theta: f64,
        c: f64,
        b: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gains: Option<Vec<f64>>,
    },
}

impl FamilySpec {
    pub fn build(&self, order: usize) -> Result<CorrectionFamily> {
        let fam = match self {
            FamilySpec::Linear { r, gains, roots } => match (gains, roots) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config("give either `gains` or `roots`, not both".into()))
                }
                (Some(g), None) => CorrectionFamily::linear(*r, g.clone())?,
                (None, Some(rs)) => {
                    let roots: Vec<Complex64> = rs.iter().map(|[re, im]| Complex64::new(*re, *im)).collect();
                    CorrectionFamily::linear_from_roots(*r, &roots)?
                }
                (None, None) => CorrectionFamily::linear_default(order, *r)?,
            },
            FamilySpec::Levant { bound, gains } => match gains {
                Some(g) => CorrectionFamily::levant_with_gains(*bound, g.clone())?,
                None => CorrectionFamily::levant(order, *bound)?,
            },
            FamilySpec::Seeber { bound, t_star } => CorrectionFamily::seeber(*bound, *t_star)?,
            FamilySpec::Menard { theta, c, b, gains } => match gains {
                Some(g) => CorrectionFamily::menard_with_gains(*theta, *c, *b, g.clone())?,
                None => CorrectionFamily::menard(order, *theta, *c, *b)?,
            },
        };
        if fam.order() != order {
            return Err(Error::DimensionMismatch {
                expected: order + 1,
                got: fam.order() + 1,
            });
        }
        Ok(fam)
    }
}

/// Whether to run the redesigned differentiator or its time-invariant base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Redesigned,
    Base,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifferentiatorConfig {
    pub order: usize,
    #[serde(default, skip_serializing_if = "is_default")]
    pub mode: Mode,
    pub alpha: f64,
    pub t_c: f64,
    /// Base settling bound; defaults to the family's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_f: Option<f64>,
    /// `L`; defaults to the family's (zero for the linear family).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// `β / β_min`; two when neither `beta` nor this is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_gains: Option<Vec<f64>>,
    /// Filtering states in front of the estimator.
    #[serde(default, skip_serializing_if = "is_default")]
    pub n_f: usize,
    /// `[w_1..w_{n_f}, z_0..z_{n_d}]` at `t = 0`.
    pub initial_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<SignalTerm>>,
}

impl SignalConfig {
    pub fn build(&self) -> Result<TestSignal> {
        match (&self.preset, &self.terms) {
            (Some(name), None) => make_preset(name),
            (None, Some(terms)) => Ok(TestSignal::new(terms.clone())),
            _ => Err(Error::Config("[signal] needs exactly one of `preset` or `terms`".into())),
        }
    }
}

fn default_step() -> f64 {
    1e-5
}

fn default_stride() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    #[serde(default = "default_step")]
    pub step: f64,
    pub horizon: f64,
    #[serde(default = "default_stride")]
    pub stride: u64,
}

fn default_settling_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_settling_tol")]
    pub settling_tol: f64,
    /// Dwell window in time units; `0.1 T_c` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settling_dwell: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            settling_tol: default_settling_tol(),
            settling_dwell: None,
        }
    }
}

fn default_stem() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default = "default_stem")]
    pub stem: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            stem: default_stem(),
        }
    }
}

fn default_beta_factor() -> f64 {
    2.0
}

/// Grid of the slack sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub initial_errors: Vec<Vec<f64>>,
    #[serde(default = "default_settling_tol")]
    pub tol: f64,
    #[serde(default = "default_beta_factor")]
    pub beta_factor: f64,
}

/// A complete, self-describing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub differentiator: DifferentiatorConfig,
    pub family: FamilySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorSpec>,
    pub signal: SignalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn family(&self) -> Result<CorrectionFamily> {
        self.family.build(self.differentiator.order)
    }

    /// Validated redesign parameters (also for base runs, where only the
    /// checks matter).
    pub fn redesign(&self) -> Result<Redesign> {
        let d = &self.differentiator;
        let fam = self.family()?;
        let t_f = d.t_f.unwrap_or_else(|| fam.settling_bound());
        let bound = d.bound.unwrap_or_else(|| fam.signal_bound().unwrap_or(0.0));
        let mut p = RedesignParams::new(d.order, d.alpha, d.t_c, t_f, bound)?;
        if d.rho != 0.0 {
            p = p.with_rho(d.rho)?;
        }
        p = match (d.beta, d.beta_factor) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either `beta` or `beta_factor`, not both".into()))
            }
            (Some(b), None) => p.with_beta(b)?,
            (None, f) => p.with_beta_factor(f.unwrap_or(2.0))?,
        };
        if let Some(mu) = d.mu {
            p = p.with_mu(mu)?;
        }
        if let Some(g) = &d.terminal_gains {
            p = p.with_terminal_gains(g.clone())?;
        }
        Redesign::new(p, fam)
    }

    pub fn law(&self) -> Result<AnyLaw> {
        let r = self.redesign()?;
        match (self.differentiator.mode, self.monitor) {
            (Mode::Base, Some(_)) => Err(Error::Config("a convergence monitor needs mode = \"redesigned\"".into())),
            (Mode::Base, None) => Ok(AnyLaw::Base(BaseLaw(r.family().clone()))),
            (Mode::Redesigned, Some(m)) => Ok(AnyLaw::Monitored(MonitoredLaw::new(r, m)?)),
            (Mode::Redesigned, None) => Ok(AnyLaw::Redesign(r)),
        }
    }

    /// Checks everything a run needs, without running it.
    pub fn validate(&self) -> Result<()> {
        let law = self.law()?;
        let d = &self.differentiator;
        if d.n_f > d.order {
            return Err(Error::invalid("n_f", "cannot exceed the order"));
        }
        if d.initial_state.len() != d.order + 1 {
            return Err(Error::DimensionMismatch {
                expected: d.order + 1,
                got: d.initial_state.len(),
            });
        }
        let _ = law;
        self.signal.build()?;
        if let Some(n) = self.noise {
            Measurement::new(self.signal.build()?, Some(n))?;
        }
        let i = &self.integration;
        if !(i.step > 0.0) || !i.step.is_finite() {
            return Err(Error::invalid("integration.step", format!("must be positive, got {}", i.step)));
        }
        if !(i.horizon > 0.0) || !i.horizon.is_finite() {
            return Err(Error::invalid(
                "integration.horizon",
                format!("must be positive, got {}", i.horizon),
            ));
        }
        if i.horizon < i.step {
            return Err(Error::invalid("integration.horizon", "shorter than one step"));
        }
        if i.stride == 0 {
            return Err(Error::invalid("integration.stride", "must be at least 1"));
        }
        if !(self.analysis.settling_tol > 0.0) {
            return Err(Error::invalid("analysis.settling_tol", "must be positive"));
        }
        if let Some(s) = &self.sweep {
            if s.alphas.is_empty() || s.initial_errors.is_empty() {
                return Err(Error::invalid("sweep", "grids must be non-empty"));
            }
        }
        Ok(())
    }

    pub fn settling_dwell(&self) -> f64 {
        self.analysis
            .settling_dwell
            .unwrap_or(0.1 * self.differentiator.t_c)
    }
}

/// Figure identifiers accepted by [`preset_config`].
pub const FIGURES: [&str; 5] = ["fig1a", "fig1b", "fig1c", "fig1d", "fig2"];

/// Step used by the figure presets.
pub const PRESET_STEP: f64 = 1e-6;

/// The configuration of one of the worked examples.
///
/// The `fig1*` presets: `n = 1`, `T_c = 1`, a first-order base with
/// `T_f = 1`, `α = 3`, `β = 2 β_min`, terminal gains `(1.5, 1.1)`, starting at
/// `z(0) = (10, 10)`. `fig2` changes to `α = 5`, `β = 1.5 β_min`.
pub fn preset_config(figure: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig {
        differentiator: DifferentiatorConfig {
            order: 1,
            mode: Mode::Redesigned,
            alpha: 3.0,
            t_c: 1.0,
            t_f: None,
            bound: None,
            beta: None,
            beta_factor: Some(2.0),
            rho: 0.0,
            mu: None,
            terminal_gains: Some(vec![1.5, 1.1]),
            n_f: 0,
            initial_state: vec![10.0, 10.0],
        },
        family: FamilySpec::Seeber {
            bound: 1.0,
            t_star: 1.0,
        },
        monitor: None,
        signal: SignalConfig {
            preset: Some("fig1a".into()),
            terms: None,
        },
        noise: None,
        integration: IntegrationConfig {
            step: PRESET_STEP,
            horizon: 2.0,
            stride: 100,
        },
        analysis: AnalysisConfig::default(),
        output: OutputConfig {
            dir: None,
            stem: figure.to_string(),
        },
        sweep: None,
    };
    match figure {
        "fig1a" => {}
        "fig1b" => cfg.noise = Some(NoiseSpec { std_dev: 0.1, seed: 1 }),
        "fig1c" => {
            cfg.family = FamilySpec::Seeber {
                bound: 10.0,
                t_star: 1.0,
            };
            cfg.signal.preset = Some("fig1c".into());
            cfg.noise = Some(NoiseSpec { std_dev: 0.1, seed: 1 });
        }
        "fig1d" => {
            cfg.differentiator.n_f = 1;
            // w_1 starts at rest; z_0 as in the other panels.
            cfg.differentiator.initial_state = vec![0.0, 10.0];
            cfg.noise = Some(NoiseSpec { std_dev: 0.5, seed: 1 });
        }
        "fig2" => {
            cfg.differentiator.alpha = 5.0;
            cfg.differentiator.beta_factor = Some(1.5);
            cfg.signal.preset = Some("fig2".into());
        }
        other => return Err(Error::UnknownPreset(other.to_string())),
    }
    Ok(cfg)
}

/// Per-channel error statistics on a time window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelStats {
    pub channel: String,
    pub max_abs: f64,
    pub rms: f64,
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub trajectory: Trajectory,
    pub settling: SettlingReport,
    pub kappa_max: Option<f64>,
    /// Error statistics on `[T_c, horizon]`.
    pub post_stats: Vec<ChannelStats>,
    pub early_switch: Option<f64>,
    pub warnings: Vec<String>,
}

/// Statistics of the `e_i` (and `w_i`) columns on `[from, until]`.
pub fn window_stats(traj: &Trajectory, from: f64, until: f64) -> Vec<ChannelStats> {
    let mut cols = traj.indexed_columns("w_");
    cols.extend(traj.indexed_columns("e_"));
    cols.iter()
        .map(|&j| {
            let mut max_abs: f64 = 0.0;
            let mut sq = 0.0;
            let mut count = 0usize;
            for (t, row) in traj.times.iter().zip(traj.rows()) {
                if *t >= from && *t <= until {
                    max_abs = max_abs.max(row[j].abs());
                    sq += row[j] * row[j];
                    count += 1;
                }
            }
            ChannelStats {
                channel: traj.labels[j].clone(),
                max_abs,
                rms: if count > 0 { (sq / count as f64).sqrt() } else { f64::NAN },
            }
        })
        .collect()
}

/// Validates and runs one simulation.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let law = cfg.law()?;
    let redesign = cfg.redesign()?;
    let p = redesign.params().clone();
    let signal = cfg.signal.build()?;
    let mut warnings = redesign.family().warnings();
    if let Some(w) = membership_warning(&signal, p.order + 1, p.bound) {
        warnings.push(w);
    }
    let measurement = Measurement::new(signal, cfg.noise)?;
    let d = &cfg.differentiator;
    let i = &cfg.integration;
    let (traj, law) = simulate_differentiator(
        law,
        measurement,
        d.n_f,
        &d.initial_state,
        i.horizon,
        i.step,
        i.stride,
    )?;
    let kappa_max = match d.mode {
        Mode::Redesigned => Some(p.kappa_bound()),
        Mode::Base => None,
    };
    let mut traj = traj
        .with_meta("config", cfg.output.stem.clone())
        .with_meta("step", i.step)
        .with_meta("seed", cfg.noise.map_or("none".to_string(), |n| n.seed.to_string()));
    traj.metadata.push(("beta".into(), p.beta.to_string()));
    let settling = detect_settling(&traj, cfg.analysis.settling_tol, cfg.settling_dwell());
    let post_stats = window_stats(&traj, p.t_c, i.horizon);
    Ok(RunOutcome {
        config: cfg.clone(),
        trajectory: traj,
        settling,
        kappa_max,
        post_stats,
        early_switch: law.early_switch(),
        warnings,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| format!("{x:.6}"))
}

impl RunOutcome {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let d = &self.config.differentiator;
        let _ = writeln!(s, "run: {}", self.config.output.stem);
        let _ = writeln!(
            s,
            "mode: {:?}, order {}, n_f {}, alpha {}, T_c {}",
            d.mode, d.order, d.n_f, d.alpha, d.t_c
        );
        if let Some(k) = self.kappa_max {
            if k.is_finite() {
                let _ = writeln!(s, "kappa_max: {k:.3}");
            } else {
                let _ = writeln!(s, "kappa_max: unbounded");
            }
        }
        let _ = writeln!(
            s,
            "settling (tol {}, dwell {}): detected {} converged {}",
            self.settling.tol,
            self.settling.dwell,
            fmt_opt(self.settling.detected_t),
            self.settling.converged
        );
        if let Some(t) = self.settling.detected_t {
            let _ = writeln!(s, "converged before T_c: {}", t <= d.t_c);
        }
        if let Some(t) = self.early_switch {
            let _ = writeln!(s, "monitor switched to terminal corrections at t = {t:.6}");
        }
        let _ = writeln!(s, "error statistics on [T_c, horizon]:");
        for c in &self.post_stats {
            let _ = writeln!(s, "  {}: max |.| = {:.3e}, rms = {:.3e}", c.channel, c.max_abs, c.rms);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// Writes trajectory, gain, settling, summary and parameter snapshot.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let stem = &self.config.output.stem;
        let mut files = Vec::new();

        let traj_path = dir.join(format!("{stem}_trajectory.csv"));
        self.trajectory.write_csv(&traj_path)?;
        files.push(traj_path);

        let mut gain = Trajectory::new(vec!["kappa".into()]);
        let j = self.trajectory.column_index("kappa").expect("kappa column");
        for (t, row) in self.trajectory.times.iter().zip(self.trajectory.rows()) {
            gain.push(*t, &[row[j]]);
        }
        let gain_path = dir.join(format!("{stem}_gain.csv"));
        gain.write_csv(&gain_path)?;
        files.push(gain_path);

        let mut w = csv::Writer::from_path(dir.join(format!("{stem}_settling.csv")))?;
        w.write_record(["detected_t", "predicted_t", "tol", "dwell", "converged"])?;
        w.write_record([
            fmt_opt(self.settling.detected_t),
            fmt_opt(self.settling.predicted_t),
            self.settling.tol.to_string(),
            self.settling.dwell.to_string(),
            self.settling.converged.to_string(),
        ])?;
        w.flush()?;
        files.push(dir.join(format!("{stem}_settling.csv")));

        let summary_path = dir.join(format!("{stem}_summary.txt"));
        fs::write(&summary_path, self.summary())?;
        files.push(summary_path);

        let params_path = dir.join(format!("{stem}_params.toml"));
        fs::write(&params_path, self.config.to_toml()?)?;
        files.push(params_path);
        Ok(files)
    }
}

/// A figure reproduction: the main run plus, for `fig2`, the unredesigned
/// base differentiator on the same signal.
pub struct Reproduction {
    pub main: RunOutcome,
    pub comparison: Option<RunOutcome>,
}

impl Reproduction {
    pub fn summary(&self) -> String {
        let mut s = self.main.summary();
        if let Some(c) = &self.comparison {
            s.push_str("\ncomparison with the time-invariant base differentiator:\n");
            s.push_str(&c.summary());
        }
        s
    }
}

/// Runs a figure preset, with an optional step and seed override.
pub fn reproduce(figure: &str, step: Option<f64>, seed: Option<u64>) -> Result<Reproduction> {
    let mut cfg = preset_config(figure)?;
    if let Some(h) = step {
        cfg.integration.step = h;
    }
    if let (Some(s), Some(n)) = (seed, cfg.noise.as_mut()) {
        n.seed = s;
    }
    let main = run_simulation(&cfg)?;
    let comparison = if figure == "fig2" {
        let mut base = cfg.clone();
        base.differentiator.mode = Mode::Base;
        base.output.stem = format!("{figure}_base");
        Some(run_simulation(&base)?)
    } else {
        None
    };
    Ok(Reproduction { main, comparison })
}

/// One named pass/fail check of a verification suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Output of one verification suite: checks plus a table for CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckResult>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("verify_{}.csv", self.suite.name()));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(path)
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "[{}] {}: {} ({})",
                self.suite.name(),
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Equivalence,
    Admissibility,
    Slack,
    Stability,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Equivalence, Suite::Admissibility, Suite::Slack, Suite::Stability];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Admissibility => "admissibility",
            Suite::Slack => "slack",
            Suite::Stability => "stability",
        }
    }

    /// `all` expands to every suite.
    pub fn parse(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Suite::ALL.to_vec()),
            _ => Suite::ALL
                .iter()
                .find(|x| x.name() == s)
                .map(|x| vec![*x])
                .ok_or_else(|| Error::Config(format!("unknown suite `{s}`"))),
        }
    }
}

/// Settings shared by the verification suites.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Integration step of the equivalence, slack and stability runs.
    pub step: f64,
    /// Integration step of the admissibility runs (long horizons).
    pub admissibility_step: f64,
    /// Uses `Qᵀ` in the coordinate change; a deliberately broken oracle.
    pub transpose_q: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            step: 1e-6,
            admissibility_step: 1e-5,
            transpose_q: false,
        }
    }
}

/// Tolerance of the coordinate-change oracle.
pub const EQUIVALENCE_TOL: f64 = 1e-2;

/// The families and rates used by the equivalence matrix at order `n`.
/// The first-order family with a finite bound only exists for `n = 1`.
pub fn equivalence_families(n: usize) -> Result<Vec<(CorrectionFamily, f64)>> {
    let mut v = vec![
        (CorrectionFamily::linear_default(n, 2.0)?, 1.0),
        (CorrectionFamily::levant(n, 1.0)?, 3.0),
    ];
    if n == 1 {
        v.push((CorrectionFamily::seeber(1.0, 1.0)?, 3.0));
    }
    v.push((CorrectionFamily::menard(n, 1.0, 0.9, 1.1)?, 3.0));
    Ok(v)
}

/// `±(1, …, 1)` and `(1, 0, …, 0)`.
pub fn equivalence_initial_errors(n: usize) -> Vec<Vec<f64>> {
    let mut unit = vec![0.0; n + 1];
    unit[0] = 1.0;
    vec![vec![1.0; n + 1], vec![-1.0; n + 1], unit]
}

/// One cell of the equivalence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceCell {
    pub family: &'static str,
    pub order: usize,
    pub alpha: f64,
    pub e0: Vec<f64>,
    pub report: Result<EquivalenceReport>,
}

/// All families × `n ∈ {0, 1}` × three initial errors, `d ≡ 0`, on
/// `[0, 0.9 T_c]`.
pub fn equivalence_matrix(opts: &VerifyOptions) -> Result<Vec<EquivalenceCell>> {
    let mut work = Vec::new();
    for n in [0usize, 1] {
        for (fam, alpha) in equivalence_families(n)? {
            for e0 in equivalence_initial_errors(n) {
                work.push((fam.clone(), alpha, e0));
            }
        }
    }
    Ok(work
        .into_par_iter()
        .map(|(fam, alpha, e0)| {
            let report = Redesign::with_defaults(fam.clone(), alpha, 1.0).and_then(|r| {
                let q = if opts.transpose_q {
                    r.structure().q.transpose()
                } else {
                    r.structure().q.clone()
                };
                equivalence_with_q(&r, &q, &e0, |_| 0.0, 0.9, opts.step, EQUIVALENCE_TOL)
            });
            EquivalenceCell {
                family: fam.name(),
                order: fam.order(),
                alpha,
                e0,
                report,
            }
        })
        .collect())
}

fn suite_equivalence(opts: &VerifyOptions) -> Result<SuiteReport> {
    let cells = equivalence_matrix(opts)?;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for c in &cells {
        let name = format!("{} n={} e0={:?}", c.family, c.order, c.e0);
        match &c.report {
            Ok(r) => {
                checks.push(CheckResult {
                    name,
                    passed: r.passed,
                    detail: format!("max_rel_dev = {:.3e} (tol {:.0e})", r.max_rel_dev, r.tol),
                });
                rows.push(vec![
                    c.family.to_string(),
                    c.order.to_string(),
                    c.alpha.to_string(),
                    format!("{:?}", c.e0),
                    format!("{:.6e}", r.max_rel_dev),
                    r.passed.to_string(),
                ]);
            }
            Err(e) => {
                checks.push(CheckResult {
                    name,
                    passed: false,
                    detail: e.to_string(),
                });
                rows.push(vec![
                    c.family.to_string(),
                    c.order.to_string(),
                    c.alpha.to_string(),
                    format!("{:?}", c.e0),
                    "nan".into(),
                    "false".into(),
                ]);
            }
        }
    }
    Ok(SuiteReport {
        suite: Suite::Equivalence,
        checks,
        header: ["family", "n", "alpha", "e0", "max_rel_dev", "passed"].map(String::from).to_vec(),
        rows,
    })
}

/// `(family, α, e(0), horizon)`.
pub type AdmissibilityCase = (CorrectionFamily, f64, Vec<f64>, f64);

/// The linear, homogeneous and first-order fixed-time families at `n = 1`,
/// with the windows used by the admissibility suite.
pub fn admissibility_cases() -> Result<Vec<AdmissibilityCase>> {
    Ok(vec![
        (CorrectionFamily::linear_default(1, 2.0)?, 1.0, vec![1.0, 1.0], 10.0),
        (CorrectionFamily::levant(1, 1.0)?, 3.0, vec![10.0, 10.0], 20.0),
        (CorrectionFamily::seeber(1.0, 1.0)?, 3.0, vec![10.0, 10.0], 5.0),
    ])
}

fn suite_admissibility(opts: &VerifyOptions) -> Result<SuiteReport> {
    let cases = admissibility_cases()?;
    let results: Vec<Result<AdmissibilityReport>> = cases
        .par_iter()
        .map(|(f, a, e0, h)| check_admissibility(f, *a, e0, *h, opts.admissibility_step))
        .collect();
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for ((f, a, e0, h), r) in cases.iter().zip(results) {
        let name = format!("{} alpha={a} e0={e0:?}", f.name());
        match r {
            Ok(rep) => {
                checks.push(CheckResult {
                    name,
                    passed: rep.passed,
                    detail: format!("gamma_fit = {:.3e}, max_violation = {:.6}", rep.gamma_fit, rep.max_violation),
                });
                rows.push(vec![
                    f.name().to_string(),
                    a.to_string(),
                    format!("{e0:?}"),
                    h.to_string(),
                    format!("{:.6e}", rep.gamma_fit),
                    format!("{:.9}", rep.max_violation),
                    rep.passed.to_string(),
                ]);
            }
            Err(e) => {
                checks.push(CheckResult {
                    name,
                    passed: false,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(SuiteReport {
        suite: Suite::Admissibility,
        checks,
        header: ["family", "alpha", "e0", "horizon", "gamma_fit", "max_violation", "passed"]
            .map(String::from)
            .to_vec(),
        rows,
    })
}

/// Initial errors of the default slack sweep: four directions at
/// magnitudes 1, 10 and 100.
pub fn default_sweep_initial_errors() -> Vec<Vec<f64>> {
    let mut v = Vec::new();
    for m in [1.0, 10.0, 100.0] {
        for (a, b) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)] {
            v.push(vec![a * m, b * m]);
        }
    }
    v
}

/// Sweep over `α ∈ {1, 3, 5, 8}` with the first-order base (`L = 1`,
/// `T_f = 1`) and `T_c = 1`.
pub fn default_sweep_spec(step: f64) -> Result<SlackSweepSpec> {
    Ok(SlackSweepSpec {
        family: CorrectionFamily::seeber(1.0, 1.0)?,
        t_c: 1.0,
        alphas: vec![1.0, 3.0, 5.0, 8.0],
        initial_errors: default_sweep_initial_errors(),
        step,
        tol: 1e-3,
        beta_factor: 2.0,
    })
}

/// Monotone decrease, and the last slack below a quarter of the first.
pub fn slack_checks(rep: &SweepReport) -> Vec<CheckResult> {
    let failures: Vec<String> = rep.cells.iter().filter_map(|c| c.failure.clone()).collect();
    let monotone = rep.slack.windows(2).all(|w| w[1] < w[0]);
    let first = rep.slack.first().copied().unwrap_or(f64::NAN);
    let last = rep.slack.last().copied().unwrap_or(f64::NAN);
    vec![
        CheckResult {
            name: "all cells ran".into(),
            passed: failures.is_empty(),
            detail: if failures.is_empty() {
                format!("{} cells", rep.cells.len())
            } else {
                failures.join("; ")
            },
        },
        CheckResult {
            name: "slack decreases monotonically in alpha".into(),
            passed: monotone,
            detail: format!("alphas {:?}, slack {:.4?}", rep.alphas, rep.slack),
        },
        CheckResult {
            name: "last slack below 25% of first".into(),
            passed: last < 0.25 * first,
            detail: format!("ratio {:.4}", last / first),
        },
    ]
}

fn sweep_rows(rep: &SweepReport) -> Vec<Vec<String>> {
    (0..rep.alphas.len())
        .map(|i| {
            vec![
                rep.alphas[i].to_string(),
                format!("{:.6}", rep.measured_t_star[i]),
                format!("{:.6}", rep.slack[i]),
                format!("{:.6}", rep.aux_t_star_estimate[i]),
                format!("{:.6}", rep.predicted_slack[i]),
                format!("{:.4}", rep.kappa_max_per_alpha[i]),
            ]
        })
        .collect()
}

/// Header of the slack-sweep CSV.
pub const SWEEP_HEADER: [&str; 6] = [
    "alpha",
    "measured_t_star",
    "slack",
    "aux_t_star_estimate",
    "predicted_slack",
    "kappa_max",
];

fn suite_slack(opts: &VerifyOptions) -> Result<SuiteReport> {
    let rep = slack_sweep(&default_sweep_spec(opts.step)?)?;
    Ok(SuiteReport {
        suite: Suite::Slack,
        checks: slack_checks(&rep),
        header: SWEEP_HEADER.map(String::from).to_vec(),
        rows: sweep_rows(&rep),
    })
}

/// Writes a sweep report as CSV.
pub fn write_sweep(rep: &SweepReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in sweep_rows(rep) {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Injection instants of the stability suite, as fractions of `T_c`.
pub const PERTURBATION_FRACTIONS: [f64; 3] = [0.5, 0.9, 0.999];

/// Size of the injected error.
pub const PERTURBATION_DELTA: f64 = 1e-4;

/// The configurations of the stability suite: `(label, redesign, role)`.
/// `role` is `"bounded"`, `"unbounded"` or `"reference"` (reported only).
pub fn stability_configs() -> Result<Vec<(&'static str, Redesign, &'static str)>> {
    Ok(vec![
        (
            "first-order base, T_f = 1, alpha = 0.5",
            Redesign::with_defaults(CorrectionFamily::seeber(1.0, 1.0)?, 0.5, 1.0)?,
            "bounded",
        ),
        (
            "linear base, n = 1, alpha = 1",
            Redesign::with_defaults(CorrectionFamily::linear_default(1, 2.0)?, 1.0, 1.0)?,
            "unbounded",
        ),
        (
            "first-order base, T_f = 1, alpha = 3",
            Redesign::with_defaults(CorrectionFamily::seeber(1.0, 1.0)?, 3.0, 1.0)?,
            "reference",
        ),
    ])
}

fn spread(rows: &[PerturbationRow]) -> f64 {
    let mx = rows.iter().map(|r| r.peak).fold(0.0, f64::max);
    let mn = rows.iter().map(|r| r.peak).fold(f64::INFINITY, f64::min);
    mx / mn
}

fn suite_stability(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for (label, r, role) in stability_configs()? {
        let res = perturbation_experiment(&r, &PERTURBATION_FRACTIONS, PERTURBATION_DELTA, opts.step)?;
        for row in &res {
            rows.push(vec![
                label.to_string(),
                role.to_string(),
                row.fraction.to_string(),
                format!("{:.6}", row.injected_at),
                format!("{:.6}", row.kappa_at_injection),
                format!("{:.6e}", row.peak),
                row.blew_up.to_string(),
            ]);
        }
        let peaks: Vec<String> = res.iter().map(|r| format!("{:.3e}", r.peak)).collect();
        match role {
            "bounded" => {
                let s = spread(&res);
                checks.push(CheckResult {
                    name: format!("{label}: peaks vary by less than 2x"),
                    passed: s < 2.0,
                    detail: format!("peaks {peaks:?}, max/min = {s:.3}"),
                });
            }
            "unbounded" => {
                let ratio = res[2].peak / res[0].peak;
                checks.push(CheckResult {
                    name: format!("{label}: late peak at least 10x the mid-window peak"),
                    passed: ratio >= 10.0,
                    detail: format!("peaks {peaks:?}, ratio = {ratio:.1}"),
                });
            }
            _ => {}
        }
    }
    Ok(SuiteReport {
        suite: Suite::Stability,
        checks,
        header: ["config", "role", "fraction", "injected_at", "kappa", "peak", "blew_up"]
            .map(String::from)
            .to_vec(),
        rows,
    })
}

/// Sizes the global worker pool used by sweeps and verification matrices.
/// Must be called before any parallel work starts.
pub fn init_workers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("workers", "must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Runs one verification suite.
pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    match suite {
        Suite::Equivalence => suite_equivalence(opts),
        Suite::Admissibility => suite_admissibility(opts),
        Suite::Slack => suite_slack(opts),
        Suite::Stability => suite_stability(opts),
    }
}

/// Slack sweep driven by a config: the config's family, `T_c` and step,
/// with its `[sweep]` section or the default grid.
pub fn sweep_from_config(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let fam = cfg.family()?;
    let s = cfg.sweep.clone().unwrap_or(SweepConfig {
        alphas: vec![1.0, 3.0, 5.0, 8.0],
        initial_errors: default_sweep_initial_errors(),
        tol: 1e-3,
        beta_factor: 2.0,
    });
    slack_sweep(&SlackSweepSpec {
        family: fam,
        t_c: cfg.differentiator.t_c,
        alphas: s.alphas,
        initial_errors: s.initial_errors,
        step: cfg.integration.step,
        tol: s.tol,
        beta_factor: s.beta_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for f in FIGURES {
            let cfg = preset_config(f).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg, "{f}:\n{text}");
        }
        assert!(matches!(preset_config("fig9"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn preset_gain_bounds() {
        let k = preset_config("fig1a").unwrap().redesign().unwrap().params().kappa_bound();
        assert!((k - 6.362).abs() < 1e-3);
        let p2 = preset_config("fig2").unwrap().redesign().unwrap();
        assert!((p2.params().beta / p2.params().beta_min() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = preset_config("fig1a").unwrap().to_toml().unwrap();
        text = text.replace("[integration]", "[integration]\nsteps = 3");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = preset_config("fig1a").unwrap();
        cfg.integration.horizon = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = preset_config("fig1a").unwrap();
        cfg.differentiator.beta_factor = Some(0.5);
        assert!(cfg.validate().is_err());
        let mut cfg = preset_config("fig1a").unwrap();
        cfg.family = FamilySpec::Linear {
            r: 1.0,
            gains: None,
            roots: None,
        };
        assert!(matches!(cfg.validate(), Err(Error::OutOfDomain { .. })));
        let mut cfg = preset_config("fig1a").unwrap();
        cfg.differentiator.order = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = preset_config("fig1a").unwrap();
        cfg.signal.terms = Some(vec![]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn linear_family_from_roots() {
        let spec = FamilySpec::Linear {
            r: 1.0,
            gains: None,
            roots: Some(vec![[-2.0, 1.0], [-2.0, -1.0]]),
        };
        let fam = spec.build(1).unwrap();
        assert_eq!(fam, CorrectionFamily::linear(1.0, vec![4.0, 5.0]).unwrap());
    }

    #[test]
    fn suite_names() {
        assert_eq!(Suite::parse("all").unwrap().len(), 4);
        assert_eq!(Suite::parse("slack").unwrap(), vec![Suite::Slack]);
        assert!(Suite::parse("speed").is_err());
    }

    #[test]
    fn short_simulation_writes_files() {
        let mut cfg = preset_config("fig1b").unwrap();
        cfg.integration.step = 1e-4;
        cfg.integration.horizon = 0.2;
        cfg.integration.stride = 10;
        let out = run_simulation(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = out.write(dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        let back = Trajectory::read_csv(&files[0]).unwrap();
        assert_eq!(back.labels, out.trajectory.labels);
        assert_eq!(back.len(), 201);
        let snap = ExperimentConfig::load(&files[4]).unwrap();
        assert_eq!(snap, cfg);
    }
}
