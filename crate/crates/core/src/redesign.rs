//! Redesign of a base differentiator into a predefined-time one.
//!
//! Given admissible corrections `Φ = [φ_0, …, φ_n]`, a desired settling bound
//! `T_c` and a rate `α`, the redesigned corrections are
//!
//! ```text
//! h_i(e_0, t) = κ(t)^{1+i−ρ} f_{ρ,i}(e_0, t)   for t < T_c
//!             = g_i(e_0)                        otherwise
//!
//! f_ρ(e_0, t) = β Q_ρ Φ(β⁻¹ κ(t)^ρ e_0) + κ(t)^ρ (U − α D_ρ)^{n+1} B_{n+1} e_0
//! κ(t)        = η / (α (T_c − η t))  on [0, T_c),   1 afterwards
//! η           = 1 − exp(−α T_f)
//! ```
//!
//! `ρ = 0` is the default. The terminal corrections `g_i` are an
//! arbitrary-order sliding-mode differentiator that keeps the error at zero
//! once it has converged.

use crate::error::{Error, Result};
use crate::family::{levant_default_gains, CorrectionFamily};
use crate::linalg::Matrix;

/// Largest supported differentiation order.
pub const MAX_ORDER: usize = 15;
const MAX_DIM: usize = MAX_ORDER + 1;

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `⌊x⌉^a = |x|^a sign(x)`, with `⌊x⌉^0 = sign(x)` and `sign(0) = 0`.
#[inline]
pub fn signed_power(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        sign(x)
    } else if a == 1.0 {
        x
    } else if a == 0.5 {
        x.abs().sqrt() * sign(x)
    } else if a == 2.0 {
        x * x.abs()
    } else {
        x.abs().powf(a) * sign(x)
    }
}

/// `x^e` using `powi` whenever `e` is integral, so that identical exponents
/// always take the identical code path.
#[inline]
fn gain_power(x: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() <= 64.0 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

/// `η = 1 − exp(−α T_f)`; exactly one for an infinite `T_f`.
pub fn compute_eta(alpha: f64, t_f: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("must be non-negative, got {alpha}")));
    }
    if !(t_f > 0.0) {
        return Err(Error::invalid("t_f", format!("must be positive, got {t_f}")));
    }
    if t_f.is_infinite() {
        return Ok(1.0);
    }
    if alpha == 0.0 {
        return Err(Error::invalid("alpha", "α = 0 is only allowed with an infinite T_f"));
    }
    Ok(-(-alpha * t_f).exp_m1())
}

/// Supremum of `κ(t)` over `t ≥ 0`: `(exp(α T_f) − 1) / (α T_c)`.
pub fn kappa_max(alpha: f64, t_c: f64, t_f: f64) -> Result<f64> {
    if !(t_c > 0.0) || !t_c.is_finite() {
        return Err(Error::invalid("t_c", format!("must be positive, got {t_c}")));
    }
    if !(t_f > 0.0) {
        return Err(Error::invalid("t_f", format!("must be positive, got {t_f}")));
    }
    if t_f.is_infinite() {
        return Err(Error::UnboundedGain);
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(t_f / t_c);
    }
    Ok((alpha * t_f).exp_m1() / (alpha * t_c))
}

/// Every scalar of the redesign.
#[derive(Debug, Clone, PartialEq)]
pub struct RedesignParams {
    /// Differentiation order `n`.
    pub order: usize,
    /// Time-scale rate `α` (1/time).
    pub alpha: f64,
    /// Desired settling bound `T_c`.
    pub t_c: f64,
    /// Settling bound of the base differentiator (may be infinite).
    pub t_f: f64,
    /// `1 − exp(−α T_f)`.
    pub eta: f64,
    /// Amplitude scale, at least [`RedesignParams::beta_min`].
    pub beta: f64,
    /// Exponent of the alternative parametrisation, in `[0, n+1]`.
    pub rho: f64,
    /// Positive floor for `L` in the terminal corrections.
    pub mu: f64,
    /// Bound `L` on `|y^{(n+1)}|`.
    pub bound: f64,
    /// Terminal gains `l_0..l_n`.
    pub terminal_gains: Vec<f64>,
}

fn default_mu(bound: f64) -> f64 {
    1e-3 * bound.max(1.0)
}

impl RedesignParams {
    /// Parameters with the default choices: `ρ = 0`, `β = 2 β_min`,
    /// `μ = 10⁻³·max(1, L)`, and the standard terminal gains when `n ≤ 3`.
    pub fn new(order: usize, alpha: f64, t_c: f64, t_f: f64, bound: f64) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::invalid("order", format!("at most {MAX_ORDER} is supported")));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
        }
        if !(t_c > 0.0) || !t_c.is_finite() {
            return Err(Error::invalid("t_c", format!("must be positive, got {t_c}")));
        }
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::invalid("bound", format!("L must be non-negative, got {bound}")));
        }
        let eta = compute_eta(alpha, t_f)?;
        let mut p = RedesignParams {
            order,
            alpha,
            t_c,
            t_f,
            eta,
            beta: 0.0,
            rho: 0.0,
            mu: default_mu(bound),
            bound,
            terminal_gains: levant_default_gains(order).unwrap_or_default(),
        };
        p.beta = 2.0 * p.beta_min();
        Ok(p)
    }

    /// Parameters whose order, `T_f` and `L` are read off the family.
    /// Families without a built-in `L` (the linear one) start from `L = 0`;
    /// use [`RedesignParams::with_bound`] to change it.
    pub fn for_family(family: &CorrectionFamily, alpha: f64, t_c: f64) -> Result<Self> {
        Self::new(
            family.order(),
            alpha,
            t_c,
            family.settling_bound(),
            family.signal_bound().unwrap_or(0.0),
        )
    }

    /// `(α T_c / η)^{n+1−ρ}`.
    pub fn beta_min(&self) -> f64 {
        (self.alpha * self.t_c / self.eta).powf(self.order as f64 + 1.0 - self.rho)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        self.beta = beta;
        self.check_beta()?;
        Ok(self)
    }

    /// `β = factor · β_min`; the factor must be at least one.
    pub fn with_beta_factor(mut self, factor: f64) -> Result<Self> {
        if !(factor >= 1.0) || !factor.is_finite() {
            return Err(Error::invalid("beta_factor", format!("must be ≥ 1, got {factor}")));
        }
        self.beta = factor * self.beta_min();
        Ok(self)
    }

    /// Sets `ρ` and resets `β` to twice the new lower bound.
    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        if !(0.0..=self.order as f64 + 1.0).contains(&rho) {
            return Err(Error::invalid(
                "rho",
                format!("must lie in [0, {}], got {rho}", self.order + 1),
            ));
        }
        self.rho = rho;
        self.beta = 2.0 * self.beta_min();
        Ok(self)
    }

    pub fn with_mu(mut self, mu: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::invalid("mu", format!("must be positive, got {mu}")));
        }
        self.mu = mu;
        Ok(self)
    }

    /// Changes `L`. A default `μ` follows the new bound.
    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::invalid("bound", format!("L must be non-negative, got {bound}")));
        }
        if self.mu == default_mu(self.bound) {
            self.mu = default_mu(bound);
        }
        self.bound = bound;
        Ok(self)
    }

    pub fn with_terminal_gains(mut self, gains: Vec<f64>) -> Result<Self> {
        self.terminal_gains = gains;
        self.check_terminal_gains()?;
        Ok(self)
    }

    fn check_beta(&self) -> Result<()> {
        let min = self.beta_min();
        if !(self.beta.is_finite() && self.beta >= min * (1.0 - 1e-12)) {
            return Err(Error::invalid(
                "beta",
                format!("β = {} is below the bound (αT_c/η)^(n+1−ρ) = {min}", self.beta),
            ));
        }
        Ok(())
    }

    fn check_terminal_gains(&self) -> Result<()> {
        if self.terminal_gains.len() != self.order + 1 {
            return Err(Error::invalid(
                "terminal_gains",
                format!(
                    "need {} gains for order {}, got {}",
                    self.order + 1,
                    self.order,
                    self.terminal_gains.len()
                ),
            ));
        }
        if let Some(g) = self.terminal_gains.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
            return Err(Error::invalid("terminal_gains", format!("gains must be non-negative, got {g}")));
        }
        Ok(())
    }

    /// Re-checks every invariant; the fields are public so they can drift.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(self.order, self.alpha, self.t_c, self.t_f, self.bound)?;
        if (fresh.eta - self.eta).abs() > 1e-15 {
            return Err(Error::invalid("eta", format!("expected {}, got {}", fresh.eta, self.eta)));
        }
        if !(0.0..=self.order as f64 + 1.0).contains(&self.rho) {
            return Err(Error::invalid("rho", format!("must lie in [0, n+1], got {}", self.rho)));
        }
        if !(self.mu > 0.0) {
            return Err(Error::invalid("mu", format!("must be positive, got {}", self.mu)));
        }
        self.check_beta()?;
        self.check_terminal_gains()
    }

    /// `κ_max`, or infinity when `T_f` is.
    pub fn kappa_bound(&self) -> f64 {
        kappa_max(self.alpha, self.t_c, self.t_f).unwrap_or(f64::INFINITY)
    }
}

/// Time-varying gain `κ(t)`.
///
/// Strictly increasing on `[0, T_c)` and reset to one from `T_c` on. With a
/// finite `T_f` the value is clamped at `κ_max` so that rounding in
/// `T_c − η t` can never overshoot the left limit.
pub fn kappa(t: f64, p: &RedesignParams) -> f64 {
    kappa_with_cap(t, p, p.kappa_bound())
}

#[inline]
fn kappa_with_cap(t: f64, p: &RedesignParams, cap: f64) -> f64 {
    if t >= p.t_c {
        return 1.0;
    }
    let k = p.eta / (p.alpha * (p.t_c - p.eta * t));
    if k > cap || k < 0.0 {
        cap
    } else {
        k
    }
}

/// `U`, `D_ρ`, `Q_ρ` and `(U − α D_ρ)^{n+1} B_{n+1}` for one `(n, α, ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrices {
    pub order: usize,
    pub alpha: f64,
    pub rho: f64,
    /// Upper shift: ones where column = row + 1.
    pub u: Matrix,
    /// `diag(−ρ, 1−ρ, …, n−ρ)`.
    pub d_rho: Matrix,
    /// Columns `(U − α D_ρ)^k B_{n+1}` for `k = n, …, 0`.
    pub q: Matrix,
    /// `(U − α D_ρ)^{n+1} B_{n+1}`.
    pub m_power: Vec<f64>,
}

/// `(U − α D_ρ) v`, without forming the matrix.
fn apply_shift_minus_scaled(v: &[f64], alpha: f64, rho: f64) -> Vec<f64> {
    let n1 = v.len();
    (0..n1)
        .map(|i| {
            let up = if i + 1 < n1 { v[i + 1] } else { 0.0 };
            up - alpha * (i as f64 - rho) * v[i]
        })
        .collect()
}

/// Builds the structure matrices by repeated matrix–vector products.
pub fn build_structure(order: usize, alpha: f64, rho: f64) -> Result<StructureMatrices> {
    if order > MAX_ORDER {
        return Err(Error::invalid("order", format!("at most {MAX_ORDER} is supported")));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid("alpha", format!("must be non-negative, got {alpha}")));
    }
    if !(0.0..=order as f64 + 1.0).contains(&rho) {
        return Err(Error::invalid("rho", format!("must lie in [0, {}], got {rho}", order + 1)));
    }
    let n1 = order + 1;
    let mut u = Matrix::zeros(n1);
    for i in 0..order {
        u.set(i, i + 1, 1.0);
    }
    let d_rho = Matrix::diagonal(&(0..n1).map(|i| i as f64 - rho).collect::<Vec<_>>());

    let mut q = Matrix::zeros(n1);
    let mut v = vec![0.0; n1];
    v[order] = 1.0;
    for k in 0..n1 {
        let col = order - k;
        for (i, &x) in v.iter().enumerate() {
            q.set(i, col, x);
        }
        v = apply_shift_minus_scaled(&v, alpha, rho);
    }
    Ok(StructureMatrices {
        order,
        alpha,
        rho,
        u,
        d_rho,
        q,
        m_power: v,
    })
}

/// A fully validated redesigned differentiator: parameters, base family and
/// cached structure.
#[derive(Debug, Clone)]
pub struct Redesign {
    params: RedesignParams,
    family: CorrectionFamily,
    structure: StructureMatrices,
    kappa_cap: f64,
}

impl Redesign {
    pub fn new(params: RedesignParams, family: CorrectionFamily) -> Result<Self> {
        params.validate()?;
        family.validate()?;
        if family.order() != params.order {
            return Err(Error::DimensionMismatch {
                expected: params.order + 1,
                got: family.order() + 1,
            });
        }
        let interval = family.alpha_interval();
        if !interval.contains(params.alpha) {
            return Err(Error::OutOfDomain {
                what: "alpha",
                value: params.alpha,
                domain: format!("I_φ = {interval} of the {} family", family.name()),
            });
        }
        if params.t_f < family.settling_bound() {
            return Err(Error::invalid(
                "t_f",
                format!(
                    "T_f = {} is below the base settling bound {}",
                    params.t_f,
                    family.settling_bound()
                ),
            ));
        }
        if let Some(l) = family.signal_bound() {
            if l != params.bound {
                return Err(Error::invalid(
                    "bound",
                    format!("L = {} does not match the family's L = {l}", params.bound),
                ));
            }
        }
        Self::unchecked(params, family)
    }

    /// Skips the admissibility checks (α ∈ I_φ, `T_f`, `L`); only the shapes
    /// must agree. Used by the pure evaluation functions.
    fn unchecked(params: RedesignParams, family: CorrectionFamily) -> Result<Self> {
        if family.order() != params.order || params.terminal_gains.len() != params.order + 1 {
            return Err(Error::DimensionMismatch {
                expected: params.order + 1,
                got: family.order() + 1,
            });
        }
        let structure = build_structure(params.order, params.alpha, params.rho)?;
        let kappa_cap = params.kappa_bound();
        Ok(Redesign {
            params,
            family,
            structure,
            kappa_cap,
        })
    }

    /// Convenience: default parameters for `family` at rate `alpha`.
    pub fn with_defaults(family: CorrectionFamily, alpha: f64, t_c: f64) -> Result<Self> {
        let params = RedesignParams::for_family(&family, alpha, t_c)?;
        Self::new(params, family)
    }

    pub fn params(&self) -> &RedesignParams {
        &self.params
    }

    pub fn family(&self) -> &CorrectionFamily {
        &self.family
    }

    pub fn structure(&self) -> &StructureMatrices {
        &self.structure
    }

    pub fn order(&self) -> usize {
        self.params.order
    }

    #[inline]
    pub fn kappa(&self, t: f64) -> f64 {
        kappa_with_cap(t, &self.params, self.kappa_cap)
    }

    /// `f(e_0, t)`; time matters only when `ρ > 0`.
    pub fn f_vec(&self, e0: f64, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.order() + 1];
        if self.params.rho == 0.0 {
            self.f_zero_into(e0, &mut out);
        } else {
            self.f_rho_into(e0, self.kappa(t), &mut out);
        }
        out
    }

    /// `β Q Φ(β⁻¹ e_0) + M e_0`.
    fn f_zero_into(&self, e0: f64, out: &mut [f64]) {
        let beta = self.params.beta;
        let mut phi = [0.0; MAX_DIM];
        let phi = &mut phi[..out.len()];
        self.family.phi_into(e0 / beta, phi);
        self.mix(phi, e0, out);
    }

    /// `β Q_ρ Φ(β⁻¹ κ^ρ e_0) + κ^ρ M e_0`, evaluated for any `ρ` (including 0).
    fn f_rho_into(&self, e0: f64, kappa: f64, out: &mut [f64]) {
        let beta = self.params.beta;
        let s = gain_power(kappa, self.params.rho);
        let mut phi = [0.0; MAX_DIM];
        let phi = &mut phi[..out.len()];
        self.family.phi_into(s * e0 / beta, phi);
        let q = &self.structure.q;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, p) in phi.iter().enumerate().take(i + 1) {
                acc += q.get(i, j) * p;
            }
            *o = beta * acc + s * (self.structure.m_power[i] * e0);
        }
    }

    fn mix(&self, phi: &[f64], e0: f64, out: &mut [f64]) {
        let beta = self.params.beta;
        let q = &self.structure.q;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, p) in phi.iter().enumerate().take(i + 1) {
                acc += q.get(i, j) * p;
            }
            *o = beta * acc + self.structure.m_power[i] * e0;
        }
    }

    /// `g_i(e_0) = l_i max(L, μ)^{(i+1)/(n+1)} ⌊e_0⌉^{(n−i)/(n+1)}`.
    pub fn g_terminal(&self, i: usize, e0: f64) -> f64 {
        g_terminal(i, e0, &self.params)
    }

    /// `h_i(e_0, t)` with the switch at `T_c`.
    pub fn h_correction(&self, i: usize, e0: f64, t: f64) -> f64 {
        let mut out = [0.0; MAX_DIM];
        let out = &mut out[..self.order() + 1];
        self.corrections_into(e0, t, Phase::at(t, self.params.t_c), out);
        out[i]
    }

    /// All `h_i` at once for an explicitly chosen phase.
    pub fn corrections_into(&self, e0: f64, t: f64, phase: Phase, out: &mut [f64]) {
        match phase {
            Phase::Terminal => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = g_terminal(i, e0, &self.params);
                }
            }
            Phase::Scaled => {
                let k = self.kappa(t);
                if self.params.rho == 0.0 {
                    self.f_zero_into(e0, out);
                } else {
                    self.f_rho_into(e0, k, out);
                }
                self.scale_by_gain(k, out);
            }
        }
    }

    /// Same as the scaled phase of [`Redesign::corrections_into`] but always
    /// through the general-`ρ` formula.
    pub fn corrections_general_into(&self, e0: f64, t: f64, out: &mut [f64]) {
        let k = self.kappa(t);
        self.f_rho_into(e0, k, out);
        self.scale_by_gain(k, out);
    }

    fn scale_by_gain(&self, k: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o *= gain_power(k, 1.0 + i as f64 - self.params.rho);
        }
    }
}

/// Which branch of the switched corrections is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// `κ(t)^{1+i−ρ} f_i` on `[0, T_c)`.
    Scaled,
    /// `g_i` from `T_c` on (or after early convergence detection).
    Terminal,
}

impl Phase {
    pub fn at(t: f64, t_c: f64) -> Self {
        if t < t_c {
            Phase::Scaled
        } else {
            Phase::Terminal
        }
    }
}

/// `g_i(e_0) = l_i max(L, μ)^{(i+1)/(n+1)} ⌊e_0⌉^{(n−i)/(n+1)}`.
pub fn g_terminal(i: usize, e0: f64, p: &RedesignParams) -> f64 {
    let n1 = p.order as f64 + 1.0;
    let i_f = i as f64;
    p.terminal_gains[i]
        * p.bound.max(p.mu).powf((i_f + 1.0) / n1)
        * signed_power(e0, (n1 - 1.0 - i_f) / n1)
}

/// Evaluates `f(e_0, t)` for any parameter set, admissible or not.
pub fn f_vec(e0: f64, p: &RedesignParams, phi: &CorrectionFamily, t: f64) -> Result<Vec<f64>> {
    Ok(Redesign::unchecked(p.clone(), phi.clone())?.f_vec(e0, t))
}

/// Evaluates `h_i(e_0, t)` for any parameter set, admissible or not.
pub fn h_correction(
    i: usize,
    e0: f64,
    t: f64,
    p: &RedesignParams,
    phi: &CorrectionFamily,
) -> Result<f64> {
    Ok(Redesign::unchecked(p.clone(), phi.clone())?.h_correction(i, e0, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn example_one() -> Redesign {
        let fam = CorrectionFamily::seeber(1.0, 1.0).unwrap();
        Redesign::with_defaults(fam, 3.0, 1.0).unwrap()
    }

    #[test]
    fn signed_power_examples() {
        assert_eq!(signed_power(-4.0, 0.5), -2.0);
        assert_eq!(signed_power(3.0, 0.0), 1.0);
        assert_eq!(signed_power(-2.0, 2.0), -4.0);
        assert_eq!(signed_power(0.0, 0.0), 0.0);
        assert_eq!(signed_power(0.0, 0.7), 0.0);
        assert_relative_eq!(signed_power(-8.0, 1.0 / 3.0), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn eta_examples() {
        assert_relative_eq!(compute_eta(3.0, 1.0).unwrap(), 0.950213, epsilon = 5e-7);
        assert_relative_eq!(compute_eta(5.0, 1.0).unwrap(), 0.993262, epsilon = 5e-7);
        assert_eq!(compute_eta(2.0, f64::INFINITY).unwrap(), 1.0);
        assert_eq!(compute_eta(0.0, f64::INFINITY).unwrap(), 1.0);
        assert!(compute_eta(-1.0, 1.0).is_err());
        assert!(compute_eta(1.0, 0.0).is_err());
        assert!(compute_eta(1.0, -2.0).is_err());
        assert!(compute_eta(0.0, 1.0).is_err());
    }

    #[test]
    fn kappa_examples() {
        let p = RedesignParams::new(1, 3.0, 1.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(kappa(0.0, &p), 0.316738, epsilon = 5e-7);
        assert_eq!(kappa(1.0, &p), 1.0);
        assert_eq!(kappa(7.0, &p), 1.0);
        let left = kappa(1.0 - 1e-12, &p);
        assert!((left - 6.362).abs() < 1e-3, "{left}");
        assert!(left <= kappa_max(3.0, 1.0, 1.0).unwrap());
    }

    #[test]
    fn kappa_max_examples() {
        assert!((kappa_max(3.0, 1.0, 1.0).unwrap() - 6.362).abs() < 1e-3);
        // (e⁵ − 1)/5 to six digits.
        assert!((kappa_max(5.0, 1.0, 1.0).unwrap() - 29.4826).abs() < 1e-4);
        assert_eq!(kappa_max(0.0, 1.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(kappa_max(1e-9, 1.0, 1.0).unwrap(), 1.0, epsilon = 1e-8);
        assert_eq!(kappa_max(3.0, 1.0, f64::INFINITY), Err(Error::UnboundedGain));
    }

    #[test]
    fn kappa_unbounded_for_infinite_tf() {
        let p = RedesignParams::new(1, 2.0, 1.0, f64::INFINITY, 0.0).unwrap();
        assert!(kappa(1.0 - 1e-9, &p) > 1e8);
        assert_eq!(p.kappa_bound(), f64::INFINITY);
    }

    #[test]
    fn kappa_log_derivative_identity() {
        // κ̇/κ = α κ, checked by central differences.
        let p = RedesignParams::new(2, 3.0, 1.0, 1.0, 1.0).unwrap();
        let h = 1e-6;
        for k in 1..99 {
            let t = k as f64 * 0.0099;
            let d = (kappa(t + h, &p) - kappa(t - h, &p)) / (2.0 * h);
            let lhs = d / kappa(t, &p);
            assert_relative_eq!(lhs, p.alpha * kappa(t, &p), max_relative = 1e-6);
        }
    }

    #[test]
    fn structure_examples() {
        for alpha in [3.0, 5.0] {
            let s = build_structure(1, alpha, 0.0).unwrap();
            assert_eq!(s.q, Matrix::from_rows(&[vec![1.0, 0.0], vec![-alpha, 1.0]]));
            assert_eq!(s.m_power, vec![-alpha, alpha * alpha]);
        }
        assert_eq!(build_structure(0, 4.0, 0.7).unwrap().q, Matrix::identity(1));
        let a = 1.5;
        let s = build_structure(2, a, 0.0).unwrap();
        // Oracle: hand-expanded columns (U−αD)²B₃, (U−αD)B₃, B₃.
        let expected = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![-3.0 * a, 1.0, 0.0],
            vec![4.0 * a * a, -2.0 * a, 1.0],
        ]);
        assert_eq!(s.q, expected);
        assert_eq!(s.u.get(0, 1), 1.0);
        assert_eq!(s.u.get(1, 2), 1.0);
        assert_eq!(s.u.get(1, 0), 0.0);
    }

    #[test]
    fn structure_exhaustive_unit_lower() {
        for n in 0..=8usize {
            for alpha in [0.5, 1.0, 3.0, 5.0] {
                for rho in [0.0, 1.0, n as f64 + 1.0] {
                    let s = build_structure(n, alpha, rho).unwrap();
                    assert!(s.q.is_lower_triangular(), "n={n} α={alpha} ρ={rho}");
                    assert!(s.q.has_unit_diagonal(), "n={n} α={alpha} ρ={rho}");
                    for i in 0..=n {
                        for j in 0..=n {
                            let expect = if j == i + 1 { 1.0 } else { 0.0 };
                            assert_eq!(s.u.get(i, j), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn f_vec_examples() {
        let r = example_one();
        assert_eq!(r.f_vec(0.0, 0.3), vec![0.0, 0.0]);
        // Second term alone: linear family with Φ ≡ 0 is not available, so
        // check M e_0 directly.
        assert_eq!(r.structure().m_power, vec![-3.0, 9.0]);
    }

    #[test]
    fn g_terminal_examples() {
        let p = RedesignParams::new(1, 3.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(p.terminal_gains, vec![1.5, 1.1]);
        assert_relative_eq!(g_terminal(0, 4.0, &p), 3.0);
        assert_relative_eq!(g_terminal(1, -0.5, &p), -1.1);
        let p0 = RedesignParams::new(1, 3.0, 1.0, 1.0, 0.0).unwrap().with_mu(0.01).unwrap();
        assert_relative_eq!(g_terminal(1, 2.0, &p0), 0.011, epsilon = 1e-15);
    }

    #[test]
    fn h_correction_example_linear() {
        // Outside I_φ on purpose: the evaluation itself must not care.
        let fam = CorrectionFamily::linear(1.0, vec![4.0, 4.0]).unwrap();
        let p = RedesignParams::new(1, 3.0, 1.0, 1.0, 0.0)
            .unwrap()
            .with_beta_factor(1.0)
            .unwrap();
        let s = build_structure(1, 3.0, 0.0).unwrap();
        let beta = p.beta;
        let f0 = beta * s.q.get(0, 0) * (4.0 * (1.0 / beta)) + s.m_power[0] * 1.0;
        let oracle = kappa(0.0, &p) * f0;
        assert_relative_eq!(oracle, 0.316738, epsilon = 5e-7);
        let h0 = h_correction(0, 1.0, 0.0, &p, &fam).unwrap();
        assert_relative_eq!(h0, oracle, max_relative = 1e-14);
        assert!(Redesign::new(p, fam).is_err());
    }

    #[test]
    fn h_switches_to_terminal() {
        let r = example_one();
        for e0 in [-3.0, 0.2, 5.0] {
            assert_eq!(r.h_correction(0, e0, 1.0), r.g_terminal(0, e0));
            assert_eq!(r.h_correction(1, e0, 1.5), r.g_terminal(1, e0));
            assert_eq!(r.h_correction(0, 0.0, 0.4), 0.0);
        }
    }

    #[test]
    fn g_terminal_sign_row_magnitude() {
        let p = RedesignParams::new(2, 1.0, 1.0, f64::INFINITY, 3.0).unwrap();
        for e0 in [-1e3, -0.1, 1e-8, 42.0] {
            assert_relative_eq!(g_terminal(2, e0, &p).abs(), 1.1 * 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn params_validation() {
        assert!(RedesignParams::new(1, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(RedesignParams::new(1, 3.0, 0.0, 1.0, 1.0).is_err());
        let p = RedesignParams::new(1, 3.0, 1.0, 1.0, 1.0).unwrap();
        assert!(p.clone().with_beta(p.beta_min() * 0.99).is_err());
        assert!(p.clone().with_beta(p.beta_min()).is_ok());
        assert!(p.clone().with_rho(2.5).is_err());
        assert!(p.clone().with_terminal_gains(vec![1.0]).is_err());
        assert!(RedesignParams::new(5, 1.0, 1.0, 1.0, 1.0).unwrap().validate().is_err());
        let mut bad = p.clone();
        bad.mu = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn redesign_rejects_mismatches() {
        let lin = CorrectionFamily::linear_default(1, 2.0).unwrap();
        let p = RedesignParams::for_family(&lin, 2.5, 1.0).unwrap();
        assert!(matches!(Redesign::new(p, lin.clone()), Err(Error::OutOfDomain { .. })));
        let p2 = RedesignParams::new(2, 1.0, 1.0, f64::INFINITY, 0.0).unwrap();
        assert!(matches!(Redesign::new(p2, lin), Err(Error::DimensionMismatch { .. })));
        let seeber = CorrectionFamily::seeber(1.0, 1.0).unwrap();
        let p3 = RedesignParams::new(1, 3.0, 1.0, 1.0, 2.0).unwrap();
        assert!(Redesign::new(p3, seeber).is_err());
    }

    proptest! {
        #[test]
        fn f_is_odd_for_odd_families(e0 in -50.0f64..50.0, t in 0.0f64..0.99) {
            for fam in [
                CorrectionFamily::linear_default(1, 4.0).unwrap(),
                CorrectionFamily::levant(2, 1.0).unwrap(),
                CorrectionFamily::menard(1, 1.0, 0.9, 1.1).unwrap(),
                CorrectionFamily::seeber(1.0, 1.0).unwrap(),
            ] {
                let r = Redesign::with_defaults(fam, 1.0, 1.0).unwrap();
                let a = r.f_vec(e0, t);
                let b = r.f_vec(-e0, t);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x + y).abs() <= 1e-12 * (1.0 + x.abs()));
                }
            }
        }

        #[test]
        fn rho_zero_paths_agree_bitwise(e0 in -20.0f64..20.0, t in 0.0f64..0.999, i in 0usize..3) {
            let fam = CorrectionFamily::levant(2, 1.0).unwrap();
            let r = Redesign::with_defaults(fam, 2.0, 1.0).unwrap();
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            r.corrections_into(e0, t, Phase::Scaled, &mut a);
            r.corrections_general_into(e0, t, &mut b);
            prop_assert_eq!(a[i].to_bits(), b[i].to_bits());
        }

        #[test]
        fn kappa_monotone_and_bounded(a in 0.0f64..0.999, b in 0.0f64..0.999, alpha in 0.2f64..8.0) {
            let p = RedesignParams::new(1, alpha, 1.0, 1.0, 1.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(kappa(lo, &p) <= kappa(hi, &p));
            prop_assert!(kappa(hi, &p) <= kappa_max(alpha, 1.0, 1.0).unwrap());
            prop_assert!(kappa(lo, &p) >= (p.eta / (alpha * p.t_c)).min(1.0) - 1e-15);
        }
    }
}
