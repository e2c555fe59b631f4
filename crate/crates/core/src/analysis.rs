//! Time-scale transformation, the coordinate-change oracle, settling-time
//! detection and prediction, the slack sweep and the perturbation experiment.

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{euler_on_times, euler_record, euler_run, AuxSystem, ErrorSystem, Grid, Trajectory};
use crate::error::{Error, Result};
use crate::family::CorrectionFamily;
use crate::linalg::{norm, Matrix};
use crate::redesign::{kappa, kappa_max, Redesign, RedesignParams};

/// `τ = −α⁻¹ ln(1 − η t / T_c)`, defined for `0 ≤ t < T_c/η`.
pub fn time_warp(t: f64, p: &RedesignParams) -> Result<f64> {
    let sup = p.t_c / p.eta;
    if !(t >= 0.0 && t < sup) {
        return Err(Error::OutOfDomain {
            what: "t",
            value: t,
            domain: format!("[0, T_c/η) = [0, {sup})"),
        });
    }
    Ok(-(-p.eta * t / p.t_c).ln_1p() / p.alpha)
}

/// `t = η⁻¹ T_c (1 − exp(−α τ))`; maps `[0, ∞)` onto `[0, T_c/η)`.
pub fn inverse_warp(tau: f64, p: &RedesignParams) -> f64 {
    if tau == f64::INFINITY {
        return p.t_c / p.eta;
    }
    -(-p.alpha * tau).exp_m1() * p.t_c / p.eta
}

/// `Λ_ρ(t) = diag(κ^{−ρ}, κ^{1−ρ}, …, κ^{n−ρ})` for `t ∈ [0, T_c)`.
pub fn lambda_matrix(t: f64, p: &RedesignParams) -> Result<Matrix> {
    if !(t >= 0.0 && t < p.t_c) {
        return Err(Error::OutOfDomain {
            what: "t",
            value: t,
            domain: format!("[0, T_c) = [0, {})", p.t_c),
        });
    }
    Ok(Matrix::diagonal(&lambda_diag(kappa(t, p), p)))
}

fn lambda_diag(k: f64, p: &RedesignParams) -> Vec<f64> {
    (0..=p.order).map(|i| k.powf(i as f64 - p.rho)).collect()
}

/// Outcome of comparing the redesigned error dynamics with the mapped
/// auxiliary system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    /// `max_k ‖e_k − ê_k‖ / max_k ‖e_k‖` (zero when both runs are identically zero).
    pub max_rel_dev: f64,
    pub window: (f64, f64),
    pub tol: f64,
    pub samples: usize,
    pub passed: bool,
}

/// Integrates `e` on the `t`-grid and `χ` on its image under the time warp,
/// maps `χ` back through `e = β Λ(t) Q χ`, and compares.
pub fn equivalence_check(
    r: &Redesign,
    e0: &[f64],
    d: impl Fn(f64) -> f64 + Sync,
    t_end: f64,
    step: f64,
    tol: f64,
) -> Result<EquivalenceReport> {
    equivalence_with_q(r, &r.structure().q, e0, d, t_end, step, tol)
}

/// [`equivalence_check`] with an arbitrary matrix in place of `Q` in the
/// coordinate change, for mutation checks.
pub fn equivalence_with_q(
    r: &Redesign,
    q: &Matrix,
    e0: &[f64],
    d: impl Fn(f64) -> f64 + Sync,
    t_end: f64,
    step: f64,
    tol: f64,
) -> Result<EquivalenceReport> {
    let p = r.params();
    let n1 = p.order + 1;
    if e0.len() != n1 {
        return Err(Error::DimensionMismatch {
            expected: n1,
            got: e0.len(),
        });
    }
    if q.dim() != n1 {
        return Err(Error::DimensionMismatch {
            expected: n1,
            got: q.dim(),
        });
    }
    if !(t_end > 0.0 && t_end < p.t_c) {
        return Err(Error::invalid(
            "t_end",
            format!("must lie in (0, T_c) = (0, {}), got {t_end}", p.t_c),
        ));
    }
    let grid = Grid::new(0.0, t_end, step)?;
    let times: Vec<f64> = (grid.k0..=grid.k1).map(|k| grid.time(k)).collect();

    let mut e_rec = Vec::with_capacity(times.len() * n1);
    let mut err_sys = ErrorSystem::new(r.clone(), &d);
    euler_run(&mut err_sys, e0, grid, |_, _, _, x| e_rec.extend_from_slice(x))?;

    // χ(0) = β⁻¹ Q⁻¹ Λ(0)⁻¹ e(0)
    let lam0 = lambda_diag(r.kappa(0.0), p);
    let scaled: Vec<f64> = e0.iter().zip(&lam0).map(|(e, l)| e / l / p.beta).collect();
    let chi0 = if q.is_lower_triangular() && q.has_unit_diagonal() {
        q.solve_unit_lower(&scaled)
    } else {
        q.solve(&scaled)
            .ok_or_else(|| Error::invalid("q", "singular coordinate change"))?
    };

    let taus = times
        .iter()
        .map(|&t| time_warp(t, p))
        .collect::<Result<Vec<f64>>>()?;
    let params = p.clone();
    let pi = |tau: f64| crate::dynamics::pi_of_tau(tau, &params, &d);
    let mut aux = AuxSystem::new(r.family().clone(), pi);
    let mut max_dev: f64 = 0.0;
    let mut max_e: f64 = 0.0;
    let mut qchi = vec![0.0; n1];
    let mut diff = vec![0.0; n1];
    euler_on_times(&mut aux, &chi0, &taus, |_, k, _, chi| {
        let k = k as usize;
        let t = times[k];
        let lam = lambda_diag(r.kappa(t), p);
        q.mul_vec_into(chi, &mut qchi);
        let e = &e_rec[k * n1..(k + 1) * n1];
        for i in 0..n1 {
            diff[i] = e[i] - p.beta * lam[i] * qchi[i];
        }
        max_dev = max_dev.max(norm(&diff));
        max_e = max_e.max(norm(e));
    })?;
    let max_rel_dev = if max_dev == 0.0 {
        0.0
    } else if max_e == 0.0 {
        f64::INFINITY
    } else {
        max_dev / max_e
    };
    Ok(EquivalenceReport {
        max_rel_dev,
        window: (0.0, times[times.len() - 1]),
        tol,
        samples: times.len(),
        passed: max_rel_dev <= tol,
    })
}

/// Detected versus predicted settling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettlingReport {
    /// First instant after which the monitored channels stay within `tol`
    /// for a full dwell window.
    pub detected_t: Option<f64>,
    /// Settling predicted from an auxiliary settling time, when known.
    pub predicted_t: Option<f64>,
    pub tol: f64,
    pub dwell: f64,
    pub converged: bool,
}

/// [`detect_settling_on`] over the `e_i` columns (every column if there
/// are none).
pub fn detect_settling(traj: &Trajectory, tol: f64, dwell: f64) -> SettlingReport {
    let mut channels = traj.indexed_columns("e_");
    if channels.is_empty() {
        channels = (0..traj.width()).collect();
    }
    detect_settling_on(traj, &channels, tol, dwell)
}

fn channel_max(row: &[f64], channels: &[usize]) -> f64 {
    channels.iter().map(|&j| row[j].abs()).fold(0.0, f64::max)
}

/// First recorded instant `t_j` such that `max_i |x_i| ≤ tol` on every
/// sample of `[t_j, t_j + dwell]`; the record must reach `t_j + dwell`.
pub fn detect_settling_on(traj: &Trajectory, channels: &[usize], tol: f64, dwell: f64) -> SettlingReport {
    let mut start: Option<f64> = None;
    let mut detected = None;
    // Half a sample of slack so that dwell windows land on grid points.
    let slack = if traj.len() > 1 {
        0.5 * (traj.times[1] - traj.times[0])
    } else {
        0.0
    };
    for (t, row) in traj.times.iter().zip(traj.rows()) {
        if channel_max(row, channels) <= tol {
            let s = *start.get_or_insert(*t);
            if t - s + slack >= dwell {
                detected = Some(s);
                break;
            }
        } else {
            start = None;
        }
    }
    SettlingReport {
        detected_t: detected,
        predicted_t: None,
        tol,
        dwell,
        converged: detected.is_some(),
    }
}

/// Instant right after the last sample in `[from, until)` with
/// `max_i |x_i| > tol`; `from` itself if there is none, `None` if the last
/// sample in the window still exceeds `tol`.
pub fn last_exit_time(traj: &Trajectory, channels: &[usize], tol: f64, from: f64, until: f64) -> Option<f64> {
    let mut settled = Some(from);
    let mut prev_exceeded = false;
    for (t, row) in traj.times.iter().zip(traj.rows()) {
        if *t < from {
            continue;
        }
        if *t >= until {
            break;
        }
        if prev_exceeded {
            settled = Some(*t);
        }
        prev_exceeded = channel_max(row, channels) > tol;
        if prev_exceeded {
            settled = None;
        }
    }
    settled
}

/// `η⁻¹ T_c (1 − exp(−α 𝒯))`: settling of the redesigned system from the
/// settling time `𝒯` of the auxiliary system.
pub fn predicted_settling(aux_t: f64, p: &RedesignParams) -> f64 {
    if aux_t == f64::INFINITY {
        return p.t_c / p.eta;
    }
    -(-p.alpha * aux_t).exp_m1() * p.t_c / p.eta
}

/// `σ(α) = 1 − (1 − exp(−α 𝒯*)) / (1 − exp(−α T_f))`.
pub fn slack_fraction(alpha: f64, aux_t_star: f64, t_f: f64) -> f64 {
    1.0 - (-alpha * aux_t_star).exp_m1() / (-alpha * t_f).exp_m1()
}

/// Inputs of the slack sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SlackSweepSpec {
    /// Base family; must have a finite `T_f`.
    pub family: CorrectionFamily,
    pub t_c: f64,
    pub alphas: Vec<f64>,
    pub initial_errors: Vec<Vec<f64>>,
    pub step: f64,
    /// Threshold on `|e_0|` defining "settled".
    pub tol: f64,
    /// `β` as a multiple of its lower bound.
    pub beta_factor: f64,
}

/// One `(α, e(0))` cell of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub ic_index: usize,
    /// Settling of `|e_0|` before `T_c`; `T_c` when it never settled.
    pub detected_t: f64,
    pub converged: bool,
    /// Settling of `|χ_0|` in the auxiliary time scale.
    pub aux_t: Option<f64>,
    pub failure: Option<String>,
}

/// Worst-case settling and slack per `α`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub alphas: Vec<f64>,
    pub measured_t_star: Vec<f64>,
    pub slack: Vec<f64>,
    pub kappa_max_per_alpha: Vec<f64>,
    /// Worst auxiliary settling over the grid (an estimate of `𝒯*`).
    pub aux_t_star_estimate: Vec<f64>,
    /// `σ(α) T_c` using the estimate above.
    pub predicted_slack: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

fn sweep_cell(spec: &SlackSweepSpec, alpha: f64, ic_index: usize) -> Result<SweepCell> {
    let fam = spec.family.clone();
    let params = RedesignParams::for_family(&fam, alpha, spec.t_c)?.with_beta_factor(spec.beta_factor)?;
    let r = Redesign::new(params.clone(), fam.clone())?;
    let e0 = &spec.initial_errors[ic_index];
    let n1 = params.order + 1;
    if e0.len() != n1 {
        return Err(Error::DimensionMismatch {
            expected: n1,
            got: e0.len(),
        });
    }

    // Redesigned run on [0, T_c): last exit of |e_0| above tol.
    let grid = Grid::new(0.0, spec.t_c, spec.step)?;
    let mut last_exceed: Option<f64> = None;
    let mut sys = ErrorSystem::new(r.clone(), |_| 0.0);
    let k_last = grid.k1;
    euler_run(&mut sys, e0, grid, |_, k, t, x| {
        if k < k_last && x[0].abs() > spec.tol {
            last_exceed = Some(t);
        }
    })?;
    let (detected_t, converged) = match last_exceed {
        None => (0.0, true),
        Some(t) if t + spec.step < spec.t_c => (t + spec.step, true),
        Some(_) => (spec.t_c, false),
    };

    // Auxiliary run from χ(0) = β⁻¹ Q⁻¹ Λ(0)⁻¹ e(0) with π ≡ 0.
    let lam0 = lambda_diag(r.kappa(0.0), &params);
    let scaled: Vec<f64> = e0.iter().zip(&lam0).map(|(e, l)| e / l / params.beta).collect();
    let chi0 = r.structure().q.solve_unit_lower(&scaled);
    let aux_tol = spec.tol / params.beta;
    let horizon = 1.5 * fam.settling_bound();
    let aux_grid = Grid::new(0.0, horizon, spec.step)?;
    let mut aux = AuxSystem::new(fam, |_| 0.0);
    let mut aux_exceed: Option<f64> = None;
    let mut aux_end = 0.0;
    euler_run(&mut aux, &chi0, aux_grid, |_, _, tau, x| {
        aux_end = tau;
        if x[0].abs() > aux_tol {
            aux_exceed = Some(tau);
        }
    })?;
    let aux_t = match aux_exceed {
        None => Some(0.0),
        Some(tau) if tau < aux_end => Some(tau + spec.step),
        Some(_) => None,
    };

    Ok(SweepCell {
        alpha,
        ic_index,
        detected_t,
        converged,
        aux_t,
        failure: None,
    })
}

/// Measures worst-case settling of `|e_0|` over the initial-error grid for
/// each `α`, with `d ≡ 0`, and the corresponding auxiliary settling times.
/// Cells run in parallel; a failing cell is recorded, not fatal.
pub fn slack_sweep(spec: &SlackSweepSpec) -> Result<SweepReport> {
    if spec.alphas.is_empty() || spec.initial_errors.is_empty() {
        return Err(Error::invalid("grid", "α grid and initial-error grid must be non-empty"));
    }
    let t_f = spec.family.settling_bound();
    if !t_f.is_finite() {
        return Err(Error::UnboundedGain);
    }
    let work: Vec<(usize, usize)> = (0..spec.alphas.len())
        .flat_map(|a| (0..spec.initial_errors.len()).map(move |i| (a, i)))
        .collect();
    let cells: Vec<SweepCell> = work
        .par_iter()
        .map(|&(a, i)| {
            let alpha = spec.alphas[a];
            sweep_cell(spec, alpha, i).unwrap_or_else(|e| SweepCell {
                alpha,
                ic_index: i,
                detected_t: f64::NAN,
                converged: false,
                aux_t: None,
                failure: Some(e.to_string()),
            })
        })
        .collect();

    let mut report = SweepReport {
        alphas: spec.alphas.clone(),
        measured_t_star: Vec::new(),
        slack: Vec::new(),
        kappa_max_per_alpha: Vec::new(),
        aux_t_star_estimate: Vec::new(),
        predicted_slack: Vec::new(),
        cells: Vec::new(),
    };
    for &alpha in &spec.alphas {
        let mine: Vec<&SweepCell> = cells.iter().filter(|c| c.alpha == alpha).collect();
        let t_star = mine
            .iter()
            .map(|c| c.detected_t)
            .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
        let aux_star = mine
            .iter()
            .map(|c| c.aux_t.unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max);
        report.measured_t_star.push(t_star);
        report.slack.push(spec.t_c - t_star);
        report.kappa_max_per_alpha.push(kappa_max(alpha, spec.t_c, t_f)?);
        report.aux_t_star_estimate.push(aux_star);
        report.predicted_slack.push(if aux_star.is_finite() {
            slack_fraction(alpha, aux_star, t_f) * spec.t_c
        } else {
            0.0
        });
    }
    report.cells = cells;
    Ok(report)
}

/// Peak error after one injected perturbation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationRow {
    pub fraction: f64,
    /// Grid instant of the injection.
    pub injected_at: f64,
    pub kappa_at_injection: f64,
    /// `max ‖e(t)‖` from the injection until `1.1 T_c`.
    pub peak: f64,
    /// The run became non-finite; `peak` is the value seen before that.
    pub blew_up: bool,
}

/// Starts from the converged state `e = 0` (with `d ≡ 0` it stays there),
/// sets `e_0 = δ` at `t = fraction · T_c`, and records the peak of `‖e‖`
/// until `1.1 T_c`. Fractions run in parallel.
pub fn perturbation_experiment(
    r: &Redesign,
    fractions: &[f64],
    delta: f64,
    step: f64,
) -> Result<Vec<PerturbationRow>> {
    let t_c = r.params().t_c;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::invalid("fractions", format!("must lie in (0, 1), got {f}")));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")));
    }
    let n1 = r.order() + 1;
    fractions
        .par_iter()
        .map(|&fraction| {
            let k0 = (fraction * t_c / step).round();
            let s = k0 * step;
            let grid = Grid::new(s, 1.1 * t_c, step)?;
            let mut e0 = vec![0.0; n1];
            e0[0] = delta;
            let mut peak: f64 = 0.0;
            let mut sys = ErrorSystem::new(r.clone(), |_| 0.0);
            let outcome = euler_run(&mut sys, &e0, grid, |_, _, _, x| peak = peak.max(norm(x)));
            let blew_up = match outcome {
                Ok(_) => false,
                Err(Error::BlowUp { .. }) => true,
                Err(e) => return Err(e),
            };
            Ok(PerturbationRow {
                fraction,
                injected_at: s,
                kappa_at_injection: r.kappa(s),
                peak: if blew_up { f64::INFINITY } else { peak },
                blew_up,
            })
        })
        .collect()
}

/// Records a redesigned error run with `d ≡ 0`; a convenience for reports.
pub fn error_run(r: &Redesign, e0: &[f64], t_end: f64, step: f64, stride: u64) -> Result<Trajectory> {
    let n1 = r.order() + 1;
    let grid = Grid::new(0.0, t_end, step)?;
    let mut labels: Vec<String> = (0..n1).map(|i| format!("e_{i}")).collect();
    labels.push("kappa".into());
    let mut sys = ErrorSystem::new(r.clone(), |_| 0.0);
    euler_record(&mut sys, e0, grid, stride, labels, |s, _, t, _, row| {
        use crate::dynamics::CorrectionLaw;
        row.push(s.law.gain(t));
    })
}
