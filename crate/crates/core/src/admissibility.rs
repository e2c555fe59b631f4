//! Empirical falsification of the exponential envelope a base family must
//! satisfy under exponentially shrinking disturbances:
//!
//! ```text
//! |d(t)| ≤ L e^{−α(n+1)t}   ⇒   ‖e(t)‖ ≤ γ(e(0), α) e^{−α(n+1)t}
//! ```
//!
//! The base error dynamics are simulated under a sign-flipping probe at the
//! full allowed magnitude. `γ` is fitted on the head of the window and then
//! checked on the whole window, so a trajectory that decays more slowly than
//! the envelope shows up as a violation.

use serde::Serialize;

use crate::dynamics::{euler_run, BaseLaw, ErrorSystem, Grid};
use crate::error::{Error, Result};
use crate::family::CorrectionFamily;
use crate::linalg::norm;

/// Knobs of [`check_admissibility_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityOptions {
    /// Disturbance bound `L` of the probe; defaults to the family's `L`, or
    /// one for families without a built-in bound.
    pub probe_bound: Option<f64>,
    /// Sign flips of the probe happen every `flip_fraction · horizon`.
    pub flip_fraction: f64,
    /// Trailing fraction of the window excluded from the fit.
    pub holdout: f64,
    /// Norms at or below this are treated as exact convergence (Euler chatter).
    pub zero_tol: f64,
    /// Relative tolerance on the envelope.
    pub tol_env: f64,
}

impl Default for AdmissibilityOptions {
    fn default() -> Self {
        AdmissibilityOptions {
            probe_bound: None,
            flip_fraction: 0.1,
            holdout: 0.25,
            zero_tol: 1e-4,
            tol_env: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// Smallest `γ` with `‖e‖ ≤ γ e^{−α(n+1)t}` on the fitting head.
    pub gamma_fit: f64,
    pub alpha_used: f64,
    /// Largest `‖e(t)‖ / (γ e^{−α(n+1)t})` over the whole window.
    pub max_violation: f64,
    pub probe_bound: f64,
    pub horizon: f64,
    pub passed: bool,
}

/// [`check_admissibility_with`] using the default options.
pub fn check_admissibility(
    fam: &CorrectionFamily,
    alpha: f64,
    e0: &[f64],
    horizon: f64,
    step: f64,
) -> Result<AdmissibilityReport> {
    check_admissibility_with(fam, alpha, e0, horizon, step, &AdmissibilityOptions::default())
}

/// Simulates `ė = −Φ(e_0) + U e + B_{n+1} d(t)` with
/// `d(t) = L e^{−α(n+1)t} · (±1)` and fits the envelope.
pub fn check_admissibility_with(
    fam: &CorrectionFamily,
    alpha: f64,
    e0: &[f64],
    horizon: f64,
    step: f64,
    opts: &AdmissibilityOptions,
) -> Result<AdmissibilityReport> {
    fam.validate()?;
    let interval = fam.alpha_interval();
    if !interval.contains(alpha) {
        return Err(Error::OutOfDomain {
            what: "alpha",
            value: alpha,
            domain: format!("I_φ = {interval}"),
        });
    }
    let n1 = fam.order() + 1;
    if e0.len() != n1 {
        return Err(Error::DimensionMismatch {
            expected: n1,
            got: e0.len(),
        });
    }
    if !(0.0..1.0).contains(&opts.holdout) {
        return Err(Error::invalid("holdout", "must lie in [0, 1)"));
    }
    if !(opts.flip_fraction > 0.0) {
        return Err(Error::invalid("flip_fraction", "must be positive"));
    }
    let bound = opts
        .probe_bound
        .unwrap_or_else(|| fam.signal_bound().filter(|l| *l > 0.0).unwrap_or(1.0));
    let rate = alpha * n1 as f64;
    let period = opts.flip_fraction * horizon;
    let probe = move |t: f64| {
        let sign = if ((t / period).floor() as i64) % 2 == 0 { 1.0 } else { -1.0 };
        bound * (-rate * t).exp() * sign
    };

    let grid = Grid::new(0.0, horizon, step)?;
    let fit_end = (1.0 - opts.holdout) * horizon;
    // Work with ln W = ln‖e‖ + rate·t to stay finite for long windows.
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut sys = ErrorSystem::new(BaseLaw(fam.clone()), probe);
    euler_run(&mut sys, e0, grid, |_, _, t, x| {
        let nrm = norm(x);
        if nrm > opts.zero_tol {
            samples.push((t, nrm.ln() + rate * t));
        }
    })?;

    let head_max = samples
        .iter()
        .filter(|(t, _)| *t <= fit_end)
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let all_max = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let (gamma_fit, max_violation) = if samples.is_empty() {
        (0.0, 0.0)
    } else if head_max == f64::NEG_INFINITY {
        // Nothing to fit on, yet the tail is non-zero.
        (0.0, f64::INFINITY)
    } else {
        (head_max.exp(), (all_max - head_max).exp())
    };
    Ok(AdmissibilityReport {
        gamma_fit,
        alpha_used: alpha,
        max_violation,
        probe_bound: bound,
        horizon,
        passed: max_violation <= 1.0 + opts.tol_env,
    })
}
