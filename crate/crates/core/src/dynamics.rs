//! Right-hand sides and fixed-step explicit Euler integration.
//!
//! Time always lives on an absolute grid `t_k = k · step`, so a run can be
//! split at any grid point and replayed bitwise. Time-varying terms (κ, the
//! measured signal, noise) are evaluated at the left endpoint of each step.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::inverse_warp;
use crate::error::{Error, Result};
use crate::family::CorrectionFamily;
use crate::redesign::{Phase, Redesign, RedesignParams};
use crate::signals::Measurement;

/// A first-order system `ẋ = F(k, t, x)`; `k` is the grid index of `t`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn derivative(&mut self, k: u64, t: f64, x: &[f64], dx: &mut [f64]);
}

/// Grid indices `k0..=k1` with `t_k = k · step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub step: f64,
    pub k0: u64,
    pub k1: u64,
}

impl Grid {
    /// `t0` must sit on the grid; `t1` is rounded to the nearest grid point.
    pub fn new(t0: f64, t1: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::invalid("step", format!("must be positive, got {step}")));
        }
        if !(t0 >= 0.0) || !t0.is_finite() {
            return Err(Error::invalid("t0", format!("must be non-negative, got {t0}")));
        }
        if !(t1 > t0) || !t1.is_finite() {
            return Err(Error::invalid("t1", format!("must exceed t0 = {t0}, got {t1}")));
        }
        let k0 = (t0 / step).round();
        if (k0 * step - t0).abs() > 1e-9 * step.max(t0 * f64::EPSILON) {
            return Err(Error::invalid("t0", format!("{t0} is not a multiple of the step {step}")));
        }
        let k1 = (t1 / step).round();
        if k1 <= k0 {
            return Err(Error::invalid("t1", "horizon shorter than one step"));
        }
        Ok(Grid {
            step,
            k0: k0 as u64,
            k1: k1 as u64,
        })
    }

    #[inline]
    pub fn time(&self, k: u64) -> f64 {
        k as f64 * self.step
    }

    pub fn steps(&self) -> u64 {
        self.k1 - self.k0
    }
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp { t })
    }
}

/// Forward Euler over `grid`, calling `visit` at every grid point (before
/// the step taken from it, and once more at the end). Returns the final state.
pub fn euler_run<S, V>(sys: &mut S, x0: &[f64], grid: Grid, mut visit: V) -> Result<Vec<f64>>
where
    S: OdeSystem,
    V: FnMut(&mut S, u64, f64, &[f64]),
{
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    check_finite(x0, grid.time(grid.k0))?;
    let mut x = x0.to_vec();
    let mut dx = vec![0.0; x.len()];
    for k in grid.k0..grid.k1 {
        let t = grid.time(k);
        visit(sys, k, t, &x);
        sys.derivative(k, t, &x, &mut dx);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += grid.step * di;
        }
        check_finite(&x, grid.time(k + 1))?;
    }
    visit(sys, grid.k1, grid.time(grid.k1), &x);
    Ok(x)
}

/// Forward Euler over an arbitrary increasing list of instants.
pub fn euler_on_times<S, V>(sys: &mut S, x0: &[f64], times: &[f64], mut visit: V) -> Result<Vec<f64>>
where
    S: OdeSystem,
    V: FnMut(&mut S, u64, f64, &[f64]),
{
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("times", "must be strictly increasing"));
    }
    let mut x = x0.to_vec();
    let mut dx = vec![0.0; x.len()];
    check_finite(&x, times.first().copied().unwrap_or(0.0))?;
    for (k, w) in times.windows(2).enumerate() {
        visit(sys, k as u64, w[0], &x);
        sys.derivative(k as u64, w[0], &x, &mut dx);
        let h = w[1] - w[0];
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += h * di;
        }
        check_finite(&x, w[1])?;
    }
    if let Some(&t) = times.last() {
        visit(sys, times.len() as u64 - 1, t, &x);
    }
    Ok(x)
}

/// Uniformly sampled record of a run.
///
/// Every row holds one value per label; `times` holds the sample instants.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    data: Vec<f64>,
    /// Parameter snapshot and seeds, written as `#` comment lines.
    pub metadata: Vec<(String, String)>,
}

impl Trajectory {
    pub fn new(labels: Vec<String>) -> Self {
        Trajectory {
            labels,
            times: Vec::new(),
            data: Vec::new(),
            metadata: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, row: &[f64]) {
        assert_eq!(row.len(), self.width(), "row width");
        self.times.push(t);
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.data[k * w..(k + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width().max(1))
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let j = self.column_index(label)?;
        Some(self.rows().map(|r| r[j]).collect())
    }

    /// Columns whose label starts with `prefix` followed by an index,
    /// e.g. `e_` → `e_0, e_1, …`.
    pub fn indexed_columns(&self, prefix: &str) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                l.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
            })
            .map(|(j, _)| j)
            .collect()
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.push((key.into(), value.to_string()));
        self
    }

    /// CSV text: `#` metadata lines, a header `t,<labels>`, then rows with 12
    /// significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s.push('t');
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (t, row) in self.times.iter().zip(self.rows()) {
            let _ = write!(s, "{}", fmt_sig(*t));
            for v in row {
                let _ = write!(s, ",{}", fmt_sig(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Parses the format produced by [`Trajectory::to_csv_string`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut metadata = Vec::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(m) = line.strip_prefix("# ") {
                if let Some((k, v)) = m.split_once(" = ") {
                    metadata.push((k.to_string(), v.to_string()));
                }
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let header = rdr.headers()?.clone();
        let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut traj = Trajectory::new(labels);
        traj.metadata = metadata;
        let mut row = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Io(format!("bad number `{s}`: {e}")))
            };
            row.clear();
            let t = parse(&rec[0])?;
            for f in rec.iter().skip(1) {
                row.push(parse(f)?);
            }
            traj.push(t, &row);
        }
        Ok(traj)
    }
}

/// Twelve significant digits in scientific notation.
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.11e}")
}

/// Integrates and records every `stride`-th grid point (plus the last).
pub fn euler_record<S, X>(
    sys: &mut S,
    x0: &[f64],
    grid: Grid,
    stride: u64,
    labels: Vec<String>,
    mut extra: X,
) -> Result<Trajectory>
where
    S: OdeSystem,
    X: FnMut(&mut S, u64, f64, &[f64], &mut Vec<f64>),
{
    if stride == 0 {
        return Err(Error::invalid("stride", "must be at least 1"));
    }
    let mut traj = Trajectory::new(labels);
    let mut row = Vec::with_capacity(traj.width());
    let mut failure = None;
    let result = euler_run(sys, x0, grid, |s, k, t, x| {
        if (k - grid.k0) % stride == 0 || k == grid.k1 {
            row.clear();
            row.extend_from_slice(x);
            extra(s, k, t, x, &mut row);
            if row.len() != traj.width() && failure.is_none() {
                failure = Some(Error::DimensionMismatch {
                    expected: traj.width(),
                    got: row.len(),
                });
            }
            if failure.is_none() {
                traj.push(t, &row);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    Ok(traj)
}

/// Integrates from `t0` to `t1` and records the state every `stride` steps.
pub fn euler_integrate<S: OdeSystem>(
    sys: &mut S,
    x0: &[f64],
    t0: f64,
    t1: f64,
    step: f64,
    stride: u64,
) -> Result<Trajectory> {
    let grid = Grid::new(t0, t1, step)?;
    let labels = (0..sys.dim()).map(|i| format!("x_{i}")).collect();
    euler_record(sys, x0, grid, stride, labels, |_, _, _, _, _| {})
}

/// Source of correction terms `h_0..h_n` for the integrator chains.
pub trait CorrectionLaw {
    fn order(&self) -> usize;
    /// The gain in effect at `t` (κ(t) before the switch, 1 after).
    fn gain(&self, t: f64) -> f64;
    /// Writes `h_i(e_0, t)` into `out`; `k` is the grid index of `t`.
    fn corrections(&mut self, k: u64, t: f64, e0: f64, out: &mut [f64]);
}

impl CorrectionLaw for Redesign {
    fn order(&self) -> usize {
        Redesign::order(self)
    }

    fn gain(&self, t: f64) -> f64 {
        self.kappa(t)
    }

    fn corrections(&mut self, _k: u64, t: f64, e0: f64, out: &mut [f64]) {
        self.corrections_into(e0, t, Phase::at(t, self.params().t_c), out);
    }
}

/// The time-invariant base differentiator, `h_i = φ_i`.
#[derive(Debug, Clone)]
pub struct BaseLaw(pub CorrectionFamily);

impl CorrectionLaw for BaseLaw {
    fn order(&self) -> usize {
        self.0.order()
    }

    fn gain(&self, _t: f64) -> f64 {
        1.0
    }

    fn corrections(&mut self, _k: u64, _t: f64, e0: f64, out: &mut [f64]) {
        self.0.phi_into(e0, out);
    }
}

/// Early-switch settings: switch to the terminal corrections once `|e_0|`
/// has stayed at or below `tol` for `dwell` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    #[serde(default = "MonitorSpec::default_tol")]
    pub tol: f64,
    #[serde(default = "MonitorSpec::default_dwell")]
    pub dwell: u64,
}

impl MonitorSpec {
    fn default_tol() -> f64 {
        1e-6
    }

    fn default_dwell() -> u64 {
        100
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::invalid("monitor.tol", format!("must be positive, got {}", self.tol)));
        }
        if self.dwell == 0 {
            return Err(Error::invalid("monitor.dwell", "must be at least one sample"));
        }
        Ok(())
    }
}

impl Default for MonitorSpec {
    fn default() -> Self {
        MonitorSpec {
            tol: Self::default_tol(),
            dwell: Self::default_dwell(),
        }
    }
}

/// Counts consecutive small-`|e_0|` samples and latches the switch time.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    spec: MonitorSpec,
    count: u64,
    last_k: Option<u64>,
    switched_at: Option<f64>,
}

impl ConvergenceMonitor {
    pub fn new(spec: MonitorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ConvergenceMonitor {
            spec,
            count: 0,
            last_k: None,
            switched_at: None,
        })
    }

    /// Feeds the sample for step `k`; repeated calls for the same `k` count once.
    pub fn observe(&mut self, k: u64, t: f64, e0: f64) {
        if self.switched_at.is_some() || self.last_k == Some(k) {
            return;
        }
        self.last_k = Some(k);
        if e0.abs() <= self.spec.tol {
            self.count += 1;
            if self.count >= self.spec.dwell {
                self.switched_at = Some(t);
            }
        } else {
            self.count = 0;
        }
    }

    pub fn switched_at(&self) -> Option<f64> {
        self.switched_at
    }
}

/// A redesign whose switch to the terminal corrections may happen before
/// `T_c`, as soon as the monitor reports convergence.
#[derive(Debug, Clone)]
pub struct MonitoredLaw {
    pub redesign: Redesign,
    pub monitor: ConvergenceMonitor,
}

impl MonitoredLaw {
    pub fn new(redesign: Redesign, spec: MonitorSpec) -> Result<Self> {
        Ok(MonitoredLaw {
            redesign,
            monitor: ConvergenceMonitor::new(spec)?,
        })
    }

    fn phase(&self, t: f64) -> Phase {
        if self.monitor.switched_at().is_some() {
            Phase::Terminal
        } else {
            Phase::at(t, self.redesign.params().t_c)
        }
    }
}

impl CorrectionLaw for MonitoredLaw {
    fn order(&self) -> usize {
        self.redesign.order()
    }

    fn gain(&self, t: f64) -> f64 {
        match self.phase(t) {
            Phase::Scaled => self.redesign.kappa(t),
            Phase::Terminal => 1.0,
        }
    }

    fn corrections(&mut self, k: u64, t: f64, e0: f64, out: &mut [f64]) {
        self.monitor.observe(k, t, e0);
        let phase = self.phase(t);
        self.redesign.corrections_into(e0, t, phase, out);
    }
}

/// Either law the simulation front ends can run.
#[derive(Debug, Clone)]
pub enum AnyLaw {
    Redesign(Redesign),
    Monitored(MonitoredLaw),
    Base(BaseLaw),
}

impl CorrectionLaw for AnyLaw {
    fn order(&self) -> usize {
        match self {
            AnyLaw::Redesign(r) => CorrectionLaw::order(r),
            AnyLaw::Monitored(m) => m.order(),
            AnyLaw::Base(b) => b.order(),
        }
    }

    fn gain(&self, t: f64) -> f64 {
        match self {
            AnyLaw::Redesign(r) => r.gain(t),
            AnyLaw::Monitored(m) => m.gain(t),
            AnyLaw::Base(b) => b.gain(t),
        }
    }

    fn corrections(&mut self, k: u64, t: f64, e0: f64, out: &mut [f64]) {
        match self {
            AnyLaw::Redesign(r) => r.corrections(k, t, e0, out),
            AnyLaw::Monitored(m) => m.corrections(k, t, e0, out),
            AnyLaw::Base(b) => b.corrections(k, t, e0, out),
        }
    }
}

impl AnyLaw {
    /// Time at which the monitor switched early, if it did.
    pub fn early_switch(&self) -> Option<f64> {
        match self {
            AnyLaw::Monitored(m) => m.monitor.switched_at(),
            _ => None,
        }
    }
}

/// `ė_i = −h_i + e_{i+1}`, `ė_n = −h_n + d(t)`, all from `h` already evaluated.
#[inline]
fn chain_into(x: &[f64], h: &[f64], last_input: f64, dx: &mut [f64]) {
    let n = x.len() - 1;
    for i in 0..n {
        dx[i] = -h[i] + x[i + 1];
    }
    dx[n] = -h[n] + last_input;
}

/// Error dynamics `ė = −h(e_0, t) + U e + B_{n+1} d(t)`.
pub struct ErrorSystem<L, D> {
    pub law: L,
    pub disturbance: D,
    h: Vec<f64>,
}

impl<L: CorrectionLaw, D: FnMut(f64) -> f64> ErrorSystem<L, D> {
    pub fn new(law: L, disturbance: D) -> Self {
        let n1 = law.order() + 1;
        ErrorSystem {
            law,
            disturbance,
            h: vec![0.0; n1],
        }
    }
}

impl<L: CorrectionLaw, D: FnMut(f64) -> f64> OdeSystem for ErrorSystem<L, D> {
    fn dim(&self) -> usize {
        self.h.len()
    }

    fn derivative(&mut self, k: u64, t: f64, x: &[f64], dx: &mut [f64]) {
        self.law.corrections(k, t, x[0], &mut self.h);
        let d = (self.disturbance)(t);
        chain_into(x, &self.h, d, dx);
    }
}

/// The differentiator, optionally with `n_f` filtering states in front.
///
/// The state is `[w_1..w_{n_f}, z_0..z_{n_d}]` with `n_f + n_d` equal to the
/// law's order. Without filtering states the output error `z_0 − y` drives
/// the corrections; with them `w_1` does and `z_0 − y` enters the last
/// filtering row.
pub struct DifferentiatorSystem<L> {
    pub law: L,
    pub measurement: Measurement,
    n_f: usize,
    h: Vec<f64>,
}

impl<L: CorrectionLaw> DifferentiatorSystem<L> {
    pub fn new(law: L, measurement: Measurement, n_f: usize) -> Result<Self> {
        let n = law.order();
        if n_f > n {
            return Err(Error::invalid(
                "n_f",
                format!("{n_f} filtering states leave no estimator for order {n}"),
            ));
        }
        Ok(DifferentiatorSystem {
            law,
            measurement,
            n_f,
            h: vec![0.0; n + 1],
        })
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn n_d(&self) -> usize {
        self.h.len() - 1 - self.n_f
    }
}

impl<L: CorrectionLaw> OdeSystem for DifferentiatorSystem<L> {
    fn dim(&self) -> usize {
        self.h.len()
    }

    fn derivative(&mut self, k: u64, t: f64, x: &[f64], dx: &mut [f64]) {
        let y = self.measurement.sample(k, t);
        filtering_chain(&mut self.law, k, t, x, y, self.n_f, &mut self.h, dx);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn filtering_chain<L: CorrectionLaw>(
    law: &mut L,
    k: u64,
    t: f64,
    x: &[f64],
    y: f64,
    n_f: usize,
    h: &mut [f64],
    dx: &mut [f64],
) {
    let e0 = if n_f == 0 { x[0] - y } else { x[0] };
    law.corrections(k, t, e0, h);
    chain_into(x, h, 0.0, dx);
    if n_f > 0 {
        dx[n_f - 1] -= y;
    }
}

/// Auxiliary system `dχ/dτ = −Φ(χ_0) + U χ + B_{n+1} π(τ)`.
pub struct AuxSystem<P> {
    pub family: CorrectionFamily,
    pub pi: P,
    phi: Vec<f64>,
}

impl<P: FnMut(f64) -> f64> AuxSystem<P> {
    pub fn new(family: CorrectionFamily, pi: P) -> Self {
        let n1 = family.order() + 1;
        AuxSystem {
            family,
            pi,
            phi: vec![0.0; n1],
        }
    }
}

impl<P: FnMut(f64) -> f64> OdeSystem for AuxSystem<P> {
    fn dim(&self) -> usize {
        self.phi.len()
    }

    fn derivative(&mut self, _k: u64, tau: f64, x: &[f64], dx: &mut [f64]) {
        self.family.phi_into(x[0], &mut self.phi);
        let p = (self.pi)(tau);
        chain_into(x, &self.phi, p, dx);
    }
}

/// `[−h_0 + e_1, …, −h_{n−1} + e_n, −h_n + d]` at time `t`.
pub fn error_rhs(e: &[f64], t: f64, law: &Redesign, d: f64) -> Result<Vec<f64>> {
    check_len(e.len(), law.order() + 1)?;
    let mut h = vec![0.0; e.len()];
    let mut dx = vec![0.0; e.len()];
    law.corrections_into(e[0], t, Phase::at(t, law.params().t_c), &mut h);
    chain_into(e, &h, d, &mut dx);
    Ok(dx)
}

/// `ż` of the differentiator with `e_0 = z_0 − y_val`.
pub fn diff_rhs(z: &[f64], t: f64, y_val: f64, law: &Redesign) -> Result<Vec<f64>> {
    check_len(z.len(), law.order() + 1)?;
    let mut law = law.clone();
    let mut h = vec![0.0; z.len()];
    let mut dx = vec![0.0; z.len()];
    filtering_chain(&mut law, 0, t, z, y_val, 0, &mut h, &mut dx);
    Ok(dx)
}

/// `[ẇ, ż]` of the filtering chain; `w` must be non-empty and
/// `len(w) + len(z) − 1` must equal the law's order.
pub fn filtering_rhs(w: &[f64], z: &[f64], t: f64, y_val: f64, law: &Redesign) -> Result<(Vec<f64>, Vec<f64>)> {
    if w.is_empty() {
        return Err(Error::invalid("w", "needs at least one filtering state"));
    }
    if z.is_empty() {
        return Err(Error::invalid("z", "needs at least one estimator state"));
    }
    check_len(w.len() + z.len(), law.order() + 1)?;
    let x: Vec<f64> = w.iter().chain(z).copied().collect();
    let mut law = law.clone();
    let mut h = vec![0.0; x.len()];
    let mut dx = vec![0.0; x.len()];
    filtering_chain(&mut law, 0, t, &x, y_val, w.len(), &mut h, &mut dx);
    let dz = dx.split_off(w.len());
    Ok((dx, dz))
}

/// `[−φ_0(χ_0) + χ_1, …, −φ_n(χ_0) + π]`.
pub fn aux_rhs(chi: &[f64], phi: &CorrectionFamily, pi_val: f64) -> Result<Vec<f64>> {
    check_len(chi.len(), phi.order() + 1)?;
    let mut f = vec![0.0; chi.len()];
    let mut dx = vec![0.0; chi.len()];
    phi.phi_into(chi[0], &mut f);
    chain_into(chi, &f, pi_val, &mut dx);
    Ok(dx)
}

/// Disturbance seen by the auxiliary system:
/// `β⁻¹ (α T_c/η)^{n+1−ρ} exp(−α(n+1−ρ)τ) d(t(τ))`.
pub fn pi_of_tau(tau: f64, p: &RedesignParams, d: impl Fn(f64) -> f64) -> f64 {
    let t = inverse_warp(tau, p);
    let dv = d(t);
    if dv == 0.0 {
        return 0.0;
    }
    let m = p.order as f64 + 1.0 - p.rho;
    (p.alpha * p.t_c / p.eta).powf(m) / p.beta * (-p.alpha * m * tau).exp() * dv
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Column labels of a differentiator run with `n_f` filtering states.
pub fn differentiator_labels(order: usize, n_f: usize) -> Vec<String> {
    let n_d = order - n_f;
    let mut labels: Vec<String> = (1..=n_f).map(|i| format!("w_{i}")).collect();
    labels.extend((0..=n_d).map(|i| format!("z_{i}")));
    labels.extend((0..=n_d).map(|i| format!("e_{i}")));
    labels.push("kappa".into());
    labels.push("y".into());
    labels.extend((1..=n_d + 1).map(|i| format!("y_d{i}")));
    labels.push("noise".into());
    labels
}

/// Runs the differentiator and records states, errors `z_i − y^{(i)}`, the
/// gain, the clean signal with its derivatives, and the noise draw.
pub fn simulate_differentiator<L: CorrectionLaw>(
    law: L,
    measurement: Measurement,
    n_f: usize,
    x0: &[f64],
    t_end: f64,
    step: f64,
    stride: u64,
) -> Result<(Trajectory, L)> {
    let order = law.order();
    let mut sys = DifferentiatorSystem::new(law, measurement, n_f)?;
    let n_d = sys.n_d();
    let grid = Grid::new(0.0, t_end, step)?;
    let labels = differentiator_labels(order, n_f);
    let traj = euler_record(&mut sys, x0, grid, stride, labels, |s, k, t, x, row| {
        let sig = &s.measurement.signal;
        for i in 0..=n_d {
            row.push(x[n_f + i] - sig.derivative(i, t));
        }
        row.push(s.law.gain(t));
        row.push(sig.value(t));
        for i in 1..=n_d + 1 {
            row.push(sig.derivative(i, t));
        }
        let nu = s.measurement.noise(k);
        row.push(nu);
    })?;
    Ok((traj, sys.law))
}

/// Runs the error dynamics and records `e`, the gain and the disturbance.
pub fn simulate_error<L: CorrectionLaw, D: FnMut(f64) -> f64>(
    law: L,
    disturbance: D,
    e0: &[f64],
    t_end: f64,
    step: f64,
    stride: u64,
) -> Result<Trajectory> {
    let n1 = law.order() + 1;
    let mut sys = ErrorSystem::new(law, disturbance);
    let grid = Grid::new(0.0, t_end, step)?;
    let mut labels: Vec<String> = (0..n1).map(|i| format!("e_{i}")).collect();
    labels.push("kappa".into());
    labels.push("d".into());
    euler_record(&mut sys, e0, grid, stride, labels, |s, _, t, _, row| {
        row.push(s.law.gain(t));
        let d = (s.disturbance)(t);
        row.push(d);
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{make_preset, SignalTerm, TestSignal};
    use approx::assert_relative_eq;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn derivative(&mut self, _k: u64, _t: f64, x: &[f64], dx: &mut [f64]) {
            dx[0] = -x[0];
        }
    }

    struct Still;
    impl OdeSystem for Still {
        fn dim(&self) -> usize {
            2
        }
        fn derivative(&mut self, _k: u64, _t: f64, _x: &[f64], dx: &mut [f64]) {
            dx.fill(0.0);
        }
    }

    struct Forced;
    impl OdeSystem for Forced {
        fn dim(&self) -> usize {
            1
        }
        fn derivative(&mut self, _k: u64, t: f64, x: &[f64], dx: &mut [f64]) {
            dx[0] = (3.0 * t).sin() - x[0].abs().sqrt() * x[0].signum();
        }
    }

    fn example_one() -> Redesign {
        Redesign::with_defaults(CorrectionFamily::seeber(1.0, 1.0).unwrap(), 3.0, 1.0).unwrap()
    }

    #[test]
    fn zero_rhs_is_constant() {
        let tr = euler_integrate(&mut Still, &[1.5, -2.0], 0.0, 1.0, 0.01, 10).unwrap();
        assert!(tr.rows().all(|r| r == [1.5, -2.0]));
        assert_eq!(tr.len(), 11);
    }

    #[test]
    fn euler_product_closed_form() {
        let tr = euler_integrate(&mut Decay, &[1.0], 0.0, 1.0, 1e-4, 10_000).unwrap();
        let x1 = tr.row(tr.len() - 1)[0];
        let oracle = (1.0f64 - 1e-4).powi(10_000);
        assert_relative_eq!(x1, oracle, max_relative = 1e-12);
        assert_relative_eq!(x1, (-1.0f64).exp(), max_relative = 1e-4);
    }

    #[test]
    fn split_runs_replay_bitwise() {
        for sys_kind in 0..2 {
            let step = 1e-3;
            let whole = if sys_kind == 0 {
                euler_run(&mut Decay, &[2.0], Grid::new(0.0, 1.0, step).unwrap(), |_, _, _, _| {})
            } else {
                euler_run(&mut Forced, &[2.0], Grid::new(0.0, 1.0, step).unwrap(), |_, _, _, _| {})
            }
            .unwrap();
            let split = if sys_kind == 0 {
                let mid = euler_run(&mut Decay, &[2.0], Grid::new(0.0, 0.5, step).unwrap(), |_, _, _, _| {}).unwrap();
                euler_run(&mut Decay, &mid, Grid::new(0.5, 1.0, step).unwrap(), |_, _, _, _| {})
            } else {
                let mid = euler_run(&mut Forced, &[2.0], Grid::new(0.0, 0.5, step).unwrap(), |_, _, _, _| {}).unwrap();
                euler_run(&mut Forced, &mid, Grid::new(0.5, 1.0, step).unwrap(), |_, _, _, _| {})
            }
            .unwrap();
            assert_eq!(whole[0].to_bits(), split[0].to_bits());
        }
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(0.0, 0.0, 1e-3).is_err());
        assert!(Grid::new(0.0, 1.0, 0.0).is_err());
        assert!(Grid::new(0.0005, 1.0, 1e-3).is_err());
        assert!(euler_integrate(&mut Decay, &[1.0], 0.0, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        struct Boom;
        impl OdeSystem for Boom {
            fn dim(&self) -> usize {
                1
            }
            fn derivative(&mut self, _k: u64, _t: f64, x: &[f64], dx: &mut [f64]) {
                dx[0] = x[0] * x[0] * 1e300;
            }
        }
        let r = euler_integrate(&mut Boom, &[1.0], 0.0, 1.0, 0.1, 1);
        assert!(matches!(r, Err(Error::BlowUp { .. })));
    }

    #[test]
    fn error_rhs_examples() {
        let r = example_one();
        assert_eq!(error_rhs(&[0.0, 0.0], 0.4, &r, 0.0).unwrap(), vec![0.0, 0.0]);
        let fam = CorrectionFamily::levant(0, 1.0).unwrap();
        let p = RedesignParams::new(0, 1.0, 1.0, f64::INFINITY, 1.0)
            .unwrap()
            .with_terminal_gains(vec![1.5])
            .unwrap();
        let r0 = Redesign::new(p, fam).unwrap();
        assert_eq!(error_rhs(&[4.0], 1.0, &r0, 0.0).unwrap(), vec![-1.5]);
        let dx = error_rhs(&[1.0, 0.0], 0.0, &r, 0.0).unwrap();
        assert_eq!(dx[0], -r.h_correction(0, 1.0, 0.0));
        assert_eq!(dx[1], -r.h_correction(1, 1.0, 0.0));
    }

    #[test]
    fn diff_rhs_examples() {
        let r = example_one();
        let sig = make_preset("fig1a").unwrap();
        let y0 = sig.value(0.0);
        let dz = diff_rhs(&[10.0, 10.0], 0.0, y0, &r).unwrap();
        let e0 = 10.0 - 0.75;
        assert_eq!(dz[0], -r.h_correction(0, e0, 0.0) + 10.0);
        assert_eq!(dz[1], -r.h_correction(1, e0, 0.0));
        // Tracking exactly: pure integrator chain.
        let dz = diff_rhs(&[y0, 3.0], 0.2, y0, &r).unwrap();
        assert_eq!(dz, vec![3.0, 0.0]);
        // diff_rhs − true derivatives = error_rhs with d = −y^{(n+1)}.
        let t = 0.37;
        let z = [1.9, -0.4];
        let ys = sig.derivative_stack(2, t);
        let dz = diff_rhs(&z, t, ys[0], &r).unwrap();
        let de = error_rhs(&[z[0] - ys[0], z[1] - ys[1]], t, &r, -ys[2]).unwrap();
        assert_relative_eq!(dz[0] - ys[1], de[0], max_relative = 1e-14);
        assert_relative_eq!(dz[1] - ys[2], de[1], max_relative = 1e-14);
    }

    #[test]
    fn filtering_rhs_examples() {
        let fam = CorrectionFamily::seeber(1.0, 1.0).unwrap();
        let r = Redesign::with_defaults(fam, 3.0, 1.0).unwrap();
        let (dw, dz) = filtering_rhs(&[0.0], &[0.0], 0.3, 0.0, &r).unwrap();
        assert_eq!((dw, dz), (vec![0.0], vec![0.0]));
        let (dw, dz) = filtering_rhs(&[0.5], &[2.0], 0.3, 1.25, &r).unwrap();
        assert_eq!(dw[0], -r.h_correction(0, 0.5, 0.3) + (2.0 - 1.25));
        assert_eq!(dz[0], -r.h_correction(1, 0.5, 0.3));
        let (dw, dz) = filtering_rhs(&[0.0], &[4.0], 1.5, 4.0, &r).unwrap();
        assert_eq!((dw[0], dz[0]), (0.0, 0.0));
        assert!(filtering_rhs(&[0.0, 0.0], &[0.0], 0.1, 0.0, &r).is_err());
        assert!(filtering_rhs(&[], &[0.0, 0.0], 0.1, 0.0, &r).is_err());
    }

    #[test]
    fn aux_rhs_examples() {
        let lin = CorrectionFamily::linear(1.0, vec![4.0, 4.0]).unwrap();
        assert_eq!(aux_rhs(&[0.0, 0.0], &lin, 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(aux_rhs(&[1.0, 0.0], &lin, 0.0).unwrap(), vec![-4.0, -4.0]);
        // Same structure as the base error dynamics with d → π.
        let mut base = ErrorSystem::new(BaseLaw(lin.clone()), |_| 0.7);
        let mut dx = [0.0; 2];
        base.derivative(0, 0.0, &[0.3, -1.2], &mut dx);
        assert_eq!(aux_rhs(&[0.3, -1.2], &lin, 0.7).unwrap(), dx.to_vec());
    }

    #[test]
    fn pi_of_tau_examples() {
        let p = RedesignParams::new(1, 3.0, 1.0, 1.0, 1.0)
            .unwrap()
            .with_beta_factor(1.0)
            .unwrap();
        assert_eq!(pi_of_tau(0.7, &p, |_| 0.0), 0.0);
        assert_relative_eq!(pi_of_tau(0.0, &p, |_| 1.0), 1.0, max_relative = 1e-14);
        for j in 0..20 {
            let tau = j as f64 * 0.1;
            let env = (-3.0 * 2.0 * tau).exp();
            assert!(pi_of_tau(tau, &p, |t| (5.0 * t).sin()).abs() <= env * (1.0 + 1e-12));
        }
    }

    #[test]
    fn monitor_latches_after_dwell() {
        let mut m = ConvergenceMonitor::new(MonitorSpec { tol: 0.1, dwell: 3 }).unwrap();
        for (k, e) in [1.0, 0.05, 0.05, 1.0, 0.0, 0.0, 0.0, 5.0].iter().enumerate() {
            m.observe(k as u64, k as f64, *e);
            m.observe(k as u64, k as f64, *e);
        }
        assert_eq!(m.switched_at(), Some(6.0));
        assert!(ConvergenceMonitor::new(MonitorSpec { tol: 0.0, dwell: 3 }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut tr = Trajectory::new(vec!["a".into(), "b".into()]).with_meta("seed", 7);
        tr.push(0.0, &[1.0, -2.5e-7]);
        tr.push(0.1, &[std::f64::consts::PI, 0.0]);
        tr.write_csv(&path).unwrap();
        let back = Trajectory::read_csv(&path).unwrap();
        assert_eq!(back.labels, tr.labels);
        assert_eq!(back.metadata, tr.metadata);
        assert_relative_eq!(back.row(1)[0], std::f64::consts::PI, max_relative = 1e-11);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\nt,a,b\n"));
        assert!(text.contains("3.14159265359e0"));
    }

    #[test]
    fn differentiator_records_errors() {
        let sig = TestSignal::new(vec![SignalTerm::Linear { amplitude: 2.0 }]);
        let m = Measurement::new(sig, None).unwrap();
        let (tr, _) = simulate_differentiator(example_one(), m, 0, &[0.0, 2.0], 0.01, 1e-3, 1).unwrap();
        assert_eq!(tr.labels, differentiator_labels(1, 0));
        // Exact start: stays exact on a ramp.
        for r in tr.rows() {
            assert!(r[2].abs() < 1e-14 && r[3].abs() < 1e-14);
        }
    }
}
