//! Admissible correction functions for the time-invariant base differentiator.
//!
//! A base differentiator runs
//!
//! ```text
//! ż_i = −φ_i(z_0 − y) + z_{i+1},   i < n
//! ż_n = −φ_n(z_0 − y)
//! ```
//!
//! and each [`CorrectionFamily`] supplies the `φ_i`, the interval of time-scale
//! rates `α` it tolerates, and its settling-time bound `T_f` (infinite when the
//! family is only asymptotic or the bound is unknown).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::redesign::signed_power;

/// Standard arbitrary-order gains `l_0..l_n` for orders 0 through 3.
const LEVANT_GAINS: [&[f64]; 4] = [
    &[1.1],
    &[1.5, 1.1],
    &[2.0, 2.12, 1.1],
    &[3.0, 4.16, 3.06, 1.1],
];

/// Default arbitrary-order gains for an order `n ≤ 3`.
pub fn levant_default_gains(order: usize) -> Result<Vec<f64>> {
    LEVANT_GAINS
        .get(order)
        .map(|g| g.to_vec())
        .ok_or_else(|| {
            Error::invalid(
                "gains",
                format!("no default gains for order {order}; supply them explicitly"),
            )
        })
}

/// The four base correction-function families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorrectionFamily {
    /// `φ_i(w) = r^{i+1} l_i w`, with `l_i` the coefficients of a Hurwitz
    /// polynomial whose roots have largest real part `−(n+1)`.
    Linear { r: f64, gains: Vec<f64> },
    /// `φ_i(w) = l_i L^{(i+1)/(n+1)} ⌊w⌉^{(n−i)/(n+1)}`.
    LevantHomogeneous { bound: f64, gains: Vec<f64> },
    /// First-order fixed-time differentiator with least settling bound `t_star`.
    SeeberFirstOrder { bound: f64, t_star: f64, k: f64 },
    /// `φ_i(w) = θ^{i+1} k_i (⌊w⌉^{(i+1)c−i} + ⌊w⌉^{(i+1)b+i})`, for `L = 0`.
    MenardFixedTime {
        theta: f64,
        c: f64,
        b: f64,
        gains: Vec<f64>,
    },
}

/// Interval `I_φ` of admissible time-scale rates: `[0, upper)` or `[0, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaInterval {
    pub upper: f64,
    pub upper_open: bool,
}

impl AlphaInterval {
    pub fn contains(&self, alpha: f64) -> bool {
        alpha >= 0.0 && (alpha < self.upper || (!self.upper_open && alpha <= self.upper))
    }
}

impl std::fmt::Display for AlphaInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.upper.is_infinite() {
            write!(f, "[0, ∞)")
        } else if self.upper_open {
            write!(f, "[0, {})", self.upper)
        } else {
            write!(f, "[0, {}]", self.upper)
        }
    }
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive and finite, got {v}")))
    }
}

fn check_gains(gains: &[f64]) -> Result<()> {
    if gains.is_empty() {
        return Err(Error::invalid("gains", "at least one gain is required"));
    }
    if let Some(g) = gains.iter().find(|g| !g.is_finite() || **g <= 0.0) {
        return Err(Error::invalid("gains", format!("gains must be positive, got {g}")));
    }
    Ok(())
}

impl CorrectionFamily {
    /// Linear family with explicit Hurwitz coefficients.
    pub fn linear(r: f64, gains: Vec<f64>) -> Result<Self> {
        check_positive("r", r)?;
        check_gains(&gains)?;
        Ok(CorrectionFamily::Linear { r, gains })
    }

    /// Linear family with gains expanded from the characteristic roots.
    pub fn linear_from_roots(r: f64, roots: &[Complex64]) -> Result<Self> {
        Self::linear(r, linear_gains_from_roots(roots)?)
    }

    /// Linear family of order `n` with all roots at `−(n+1)`.
    pub fn linear_default(order: usize, r: f64) -> Result<Self> {
        Self::linear(r, repeated_root_gains(order))
    }

    pub fn levant(order: usize, bound: f64) -> Result<Self> {
        Self::levant_with_gains(bound, levant_default_gains(order)?)
    }

    pub fn levant_with_gains(bound: f64, gains: Vec<f64>) -> Result<Self> {
        if !(bound.is_finite() && bound >= 0.0) {
            return Err(Error::invalid("bound", format!("L must be non-negative, got {bound}")));
        }
        check_gains(&gains)?;
        Ok(CorrectionFamily::LevantHomogeneous { bound, gains })
    }

    /// First-order family; `k = 9.8 / (√L · t_star)`.
    pub fn seeber(bound: f64, t_star: f64) -> Result<Self> {
        check_positive("bound", bound)?;
        check_positive("t_star", t_star)?;
        let k = 9.8 / (bound.sqrt() * t_star);
        Ok(CorrectionFamily::SeeberFirstOrder { bound, t_star, k })
    }

    /// Fixed-time family with the default gains: Hurwitz coefficients for all
    /// roots at `−(n+1)`.
    pub fn menard(order: usize, theta: f64, c: f64, b: f64) -> Result<Self> {
        Self::menard_with_gains(theta, c, b, repeated_root_gains(order))
    }

    pub fn menard_with_gains(theta: f64, c: f64, b: f64, gains: Vec<f64>) -> Result<Self> {
        check_gains(&gains)?;
        menard_tf(theta, c, b)?;
        let n = gains.len() - 1;
        // φ_n carries the smallest exponent (n+1)c − n; a negative exponent
        // would make it singular at the origin.
        if (n as f64 + 1.0) * c - (n as f64) < 0.0 {
            return Err(Error::invalid(
                "c",
                format!("c = {c} gives a negative exponent for order {n}; need c ≥ n/(n+1)"),
            ));
        }
        Ok(CorrectionFamily::MenardFixedTime { theta, c, b, gains })
    }

    /// Re-checks every constructor invariant. Useful after deserialising.
    pub fn validate(&self) -> Result<()> {
        match self {
            CorrectionFamily::Linear { r, gains } => {
                Self::linear(*r, gains.clone())?;
            }
            CorrectionFamily::LevantHomogeneous { bound, gains } => {
                Self::levant_with_gains(*bound, gains.clone())?;
            }
            CorrectionFamily::SeeberFirstOrder { bound, t_star, k } => {
                let fresh = Self::seeber(*bound, *t_star)?;
                if let CorrectionFamily::SeeberFirstOrder { k: k_ref, .. } = fresh {
                    if (k - k_ref).abs() > 1e-12 * k_ref {
                        return Err(Error::invalid("k", format!("expected {k_ref}, got {k}")));
                    }
                }
            }
            CorrectionFamily::MenardFixedTime { theta, c, b, gains } => {
                Self::menard_with_gains(*theta, *c, *b, gains.clone())?;
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorrectionFamily::Linear { .. } => "linear",
            CorrectionFamily::LevantHomogeneous { .. } => "levant",
            CorrectionFamily::SeeberFirstOrder { .. } => "seeber",
            CorrectionFamily::MenardFixedTime { .. } => "menard",
        }
    }

    /// Differentiation order `n` (the family has `n+1` correction functions).
    pub fn order(&self) -> usize {
        match self {
            CorrectionFamily::Linear { gains, .. }
            | CorrectionFamily::LevantHomogeneous { gains, .. }
            | CorrectionFamily::MenardFixedTime { gains, .. } => gains.len() - 1,
            CorrectionFamily::SeeberFirstOrder { .. } => 1,
        }
    }

    /// Signal-class bound `L` built into the family, if it has one.
    pub fn signal_bound(&self) -> Option<f64> {
        match self {
            CorrectionFamily::LevantHomogeneous { bound, .. }
            | CorrectionFamily::SeeberFirstOrder { bound, .. } => Some(*bound),
            CorrectionFamily::MenardFixedTime { .. } => Some(0.0),
            CorrectionFamily::Linear { .. } => None,
        }
    }

    pub fn alpha_interval(&self) -> AlphaInterval {
        match self {
            CorrectionFamily::Linear { r, .. } => AlphaInterval {
                upper: *r,
                upper_open: true,
            },
            _ => AlphaInterval {
                upper: f64::INFINITY,
                upper_open: true,
            },
        }
    }

    /// Settling-time bound `T_f` of the base differentiator.
    pub fn settling_bound(&self) -> f64 {
        match self {
            CorrectionFamily::Linear { .. } | CorrectionFamily::LevantHomogeneous { .. } => {
                f64::INFINITY
            }
            CorrectionFamily::SeeberFirstOrder { t_star, .. } => *t_star,
            CorrectionFamily::MenardFixedTime { theta, c, b, .. } => {
                4.0 / theta * (1.0 / (1.0 - c) + 1.0 / (b - 1.0))
            }
        }
    }

    /// Soft warnings that do not invalidate the family.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let CorrectionFamily::MenardFixedTime { c, b, .. } = self {
            if 1.0 - c > 0.2 || b - 1.0 > 0.2 {
                out.push(format!(
                    "menard exponents c = {c}, b = {b} are far from 1; the settling bound may not hold"
                ));
            }
        }
        out
    }

    /// `φ_i(w)`.
    pub fn phi(&self, i: usize, w: f64) -> f64 {
        match self {
            CorrectionFamily::Linear { r, gains } => r.powi(i as i32 + 1) * gains[i] * w,
            CorrectionFamily::LevantHomogeneous { bound, gains } => {
                let n1 = gains.len() as f64;
                let n = n1 - 1.0;
                let i_f = i as f64;
                gains[i] * bound.powf((i_f + 1.0) / n1) * signed_power(w, (n - i_f) / n1)
            }
            CorrectionFamily::SeeberFirstOrder { bound, k, .. } => match i {
                0 => 4.0 * bound.sqrt() * (signed_power(w, 0.5) + k * signed_power(w, 1.5)),
                1 => {
                    2.0 * bound
                        * (signed_power(w, 0.0)
                            + 4.0 * k * k * w
                            + 3.0 * k.powi(4) * signed_power(w, 2.0))
                }
                _ => panic!("first-order family has no correction index {i}"),
            },
            CorrectionFamily::MenardFixedTime { theta, c, b, gains } => {
                let i_f = i as f64;
                theta.powi(i as i32 + 1)
                    * gains[i]
                    * (signed_power(w, (i_f + 1.0) * c - i_f)
                        + signed_power(w, (i_f + 1.0) * b + i_f))
            }
        }
    }

    /// Writes `Φ(w) = [φ_0(w), …, φ_n(w)]` into `out`.
    pub fn phi_into(&self, w: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.phi(i, w);
        }
    }

    pub fn phi_vec(&self, w: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.order() + 1];
        self.phi_into(w, &mut out);
        out
    }
}

/// Free-function form of [`CorrectionFamily::phi`].
pub fn phi_eval(fam: &CorrectionFamily, i: usize, w: f64) -> f64 {
    fam.phi(i, w)
}

/// Settling bound of the fixed-time family:
/// `T_f = (4/θ)·((1−c)⁻¹ + (b−1)⁻¹)`.
pub fn menard_tf(theta: f64, c: f64, b: f64) -> Result<f64> {
    if !(theta >= 1.0 && theta.is_finite()) {
        return Err(Error::invalid("theta", format!("need θ ≥ 1, got {theta}")));
    }
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::invalid("c", format!("need c ∈ (0,1), got {c}")));
    }
    if !(b > 1.0 && b.is_finite()) {
        return Err(Error::invalid("b", format!("need b > 1, got {b}")));
    }
    Ok(4.0 / theta * (1.0 / (1.0 - c) + 1.0 / (b - 1.0)))
}

/// Coefficients of `(s + n + 1)^{n+1}` without the leading one.
fn repeated_root_gains(order: usize) -> Vec<f64> {
    let roots = vec![Complex64::new(-(order as f64 + 1.0), 0.0); order + 1];
    expand_monic(&roots)
}

fn expand_monic(roots: &[Complex64]) -> Vec<f64> {
    // poly[k] is the coefficient of s^{m-k} for the partial product of degree m.
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for &root in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (k, &c) in poly.iter().enumerate() {
            next[k] += c;
            next[k + 1] -= c * root;
        }
        poly = next;
    }
    poly[1..].iter().map(|c| c.re).collect()
}

/// Real coefficients `l_0..l_n` of `∏(s − λ_i) = s^{n+1} + l_0 s^n + … + l_n`.
///
/// The roots must be closed under conjugation, lie in the open left half
/// plane, and have largest real part exactly `−(n+1)`.
pub fn linear_gains_from_roots(roots: &[Complex64]) -> Result<Vec<f64>> {
    if roots.is_empty() {
        return Err(Error::invalid("roots", "at least one root is required"));
    }
    let target = -(roots.len() as f64);
    let tol = 1e-9 * roots.len() as f64;
    if let Some(r) = roots.iter().find(|r| !(r.re < 0.0) || !r.im.is_finite()) {
        return Err(Error::invalid("roots", format!("root {r} is not in the open left half plane")));
    }
    let max_re = roots.iter().map(|r| r.re).fold(f64::NEG_INFINITY, f64::max);
    if (max_re - target).abs() > tol {
        return Err(Error::invalid(
            "roots",
            format!("largest real part must be {target}, got {max_re}"),
        ));
    }
    let mut unmatched: Vec<Complex64> = roots.iter().copied().filter(|r| r.im.abs() > tol).collect();
    while let Some(r) = unmatched.pop() {
        match unmatched.iter().position(|s| (s - r.conj()).norm() <= tol * (1.0 + r.norm())) {
            Some(pos) => {
                unmatched.swap_remove(pos);
            }
            None => {
                return Err(Error::invalid("roots", format!("root {r} has no conjugate partner")))
            }
        }
    }
    Ok(expand_monic(roots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn real(v: &[f64]) -> Vec<Complex64> {
        v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
    }

    #[test]
    fn gains_from_roots_expand_products() {
        assert_eq!(linear_gains_from_roots(&real(&[-1.0])).unwrap(), vec![1.0]);
        assert_eq!(linear_gains_from_roots(&real(&[-2.0, -2.0])).unwrap(), vec![4.0, 4.0]);
        assert_eq!(
            linear_gains_from_roots(&real(&[-3.0, -3.0, -3.0])).unwrap(),
            vec![9.0, 27.0, 27.0]
        );
    }

    #[test]
    fn gains_from_complex_pair() {
        // (s+2)^2 + 1 = s^2 + 4s + 5
        let roots = [Complex64::new(-2.0, 1.0), Complex64::new(-2.0, -1.0)];
        let g = linear_gains_from_roots(&roots).unwrap();
        assert_relative_eq!(g[0], 4.0);
        assert_relative_eq!(g[1], 5.0);
    }

    #[test]
    fn gains_from_roots_rejects_bad_sets() {
        assert!(linear_gains_from_roots(&real(&[-1.0, -2.0])).is_err());
        assert!(linear_gains_from_roots(&[Complex64::new(-2.0, 1.0), Complex64::new(-3.0, 0.0)]).is_err());
        assert!(linear_gains_from_roots(&real(&[0.5, -2.0])).is_err());
        assert!(linear_gains_from_roots(&[]).is_err());
    }

    #[test]
    fn levant_order_two_sign_row() {
        let fam = CorrectionFamily::levant_with_gains(1.0, vec![2.0, 2.12, 1.1]).unwrap();
        assert_eq!(fam.phi(2, -1.0), -1.1);
        assert_eq!(fam.phi(2, -1e-9), -1.1);
    }

    #[test]
    fn seeber_gain_and_first_row() {
        let fam = CorrectionFamily::seeber(1.0, 1.0).unwrap();
        match &fam {
            CorrectionFamily::SeeberFirstOrder { k, .. } => assert_relative_eq!(*k, 9.8),
            _ => unreachable!(),
        }
        assert_relative_eq!(fam.phi(0, 1.0), 43.2, epsilon = 1e-12);
        assert_eq!(fam.settling_bound(), 1.0);
    }

    #[test]
    fn odd_families_vanish_at_origin() {
        let fams = [
            CorrectionFamily::linear_default(2, 1.0).unwrap(),
            CorrectionFamily::levant(2, 1.0).unwrap(),
            CorrectionFamily::seeber(1.0, 1.0).unwrap(),
            CorrectionFamily::menard(1, 1.0, 0.9, 1.1).unwrap(),
        ];
        for fam in &fams {
            for i in 0..=fam.order() {
                assert_eq!(fam.phi(i, 0.0), 0.0, "{} φ_{i}(0)", fam.name());
                assert_eq!(fam.phi(i, -0.3), -fam.phi(i, 0.3), "{} φ_{i} odd", fam.name());
            }
        }
    }

    #[test]
    fn menard_settling_bound() {
        assert_relative_eq!(menard_tf(1.0, 0.9, 1.1).unwrap(), 80.0, epsilon = 1e-9);
        assert_relative_eq!(menard_tf(2.0, 0.9, 1.1).unwrap(), 40.0, epsilon = 1e-9);
        assert!(menard_tf(1.0, 1.0 - 1e-12, 1.1).unwrap() > 1e12);
        assert!(menard_tf(0.5, 0.9, 1.1).is_err());
        assert!(menard_tf(1.0, 1.0, 1.1).is_err());
        assert!(menard_tf(1.0, 0.0, 1.1).is_err());
        assert!(menard_tf(1.0, 0.9, 1.0).is_err());
    }

    #[test]
    fn menard_bound_monotonicity_grid() {
        let grid = [0.5, 0.7, 0.9, 0.95, 0.99];
        for &c in &grid {
            let b = 2.0 - c;
            let mut prev = f64::INFINITY;
            for theta in [1.0, 1.5, 2.0, 4.0] {
                let tf = menard_tf(theta, c, b).unwrap();
                assert!(tf < prev);
                prev = tf;
            }
        }
        for w in grid.windows(2) {
            assert!(menard_tf(1.0, w[1], 1.1).unwrap() > menard_tf(1.0, w[0], 1.1).unwrap());
            assert!(menard_tf(1.0, 0.9, 2.0 - w[1]).unwrap() > menard_tf(1.0, 0.9, 2.0 - w[0]).unwrap());
        }
    }

    #[test]
    fn menard_far_exponents_warn() {
        assert!(CorrectionFamily::menard(1, 1.0, 0.9, 1.1).unwrap().warnings().is_empty());
        assert_eq!(CorrectionFamily::menard(1, 1.0, 0.7, 1.1).unwrap().warnings().len(), 1);
        assert!(CorrectionFamily::menard(1, 1.0, 0.4, 1.1).is_err());
    }

    #[test]
    fn linear_scales_with_r() {
        let gains = vec![4.0, 4.0];
        for r in [0.5, 1.0, 2.0, 3.5] {
            let fam = CorrectionFamily::linear(r, gains.clone()).unwrap();
            for i in 0..2 {
                let base = CorrectionFamily::linear(1.0, gains.clone()).unwrap().phi(i, 1.0);
                assert_relative_eq!(fam.phi(i, 2.5), 2.5 * r.powi(i as i32 + 1) * base, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn levant_homogeneity() {
        let fam = CorrectionFamily::levant(2, 1.7).unwrap();
        for lambda in [0.3, 1.0, 2.0, 7.5] {
            for w in [-2.0, -0.1, 0.4, 3.0] {
                for i in 0..=2 {
                    let ratio = fam.phi(i, lambda * lambda * lambda * w) / fam.phi(i, w);
                    assert_relative_eq!(ratio, lambda.powi(2 - i as i32), max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn constructor_order_restrictions() {
        assert_eq!(CorrectionFamily::seeber(1.0, 1.0).unwrap().order(), 1);
        assert!(CorrectionFamily::seeber(0.0, 1.0).is_err());
        assert_eq!(CorrectionFamily::menard(2, 1.0, 0.9, 1.1).unwrap().signal_bound(), Some(0.0));
        assert!(levant_default_gains(4).is_err());
    }

    #[test]
    fn alpha_interval_membership() {
        let lin = CorrectionFamily::linear_default(1, 2.0).unwrap();
        assert!(lin.alpha_interval().contains(1.99));
        assert!(!lin.alpha_interval().contains(2.0));
        assert!(CorrectionFamily::levant(1, 1.0).unwrap().alpha_interval().contains(1e6));
    }
}
