//! Analytic test signals with exact derivative stacks, and seeded measurement
//! noise tied to the integration grid.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One additive term of a test signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalTerm {
    /// `a cos(ω t)`
    Cosine { amplitude: f64, frequency: f64 },
    /// `a sin(ω t)`
    Sine { amplitude: f64, frequency: f64 },
    /// `a t`
    Linear { amplitude: f64 },
    /// `Σ c_j t^j`
    Polynomial { coefficients: Vec<f64> },
}

impl SignalTerm {
    fn derivative(&self, order: usize, t: f64) -> f64 {
        match *self {
            SignalTerm::Cosine { amplitude, frequency } => {
                let s = amplitude * frequency.powi(order as i32);
                let (sin, cos) = (frequency * t).sin_cos();
                match order % 4 {
                    0 => s * cos,
                    1 => -s * sin,
                    2 => -s * cos,
                    _ => s * sin,
                }
            }
            SignalTerm::Sine { amplitude, frequency } => {
                let s = amplitude * frequency.powi(order as i32);
                let (sin, cos) = (frequency * t).sin_cos();
                match order % 4 {
                    0 => s * sin,
                    1 => s * cos,
                    2 => -s * sin,
                    _ => -s * cos,
                }
            }
            SignalTerm::Linear { amplitude } => match order {
                0 => amplitude * t,
                1 => amplitude,
                _ => 0.0,
            },
            SignalTerm::Polynomial { ref coefficients } => {
                // Horner on the differentiated coefficients.
                let mut acc = 0.0;
                for j in (order..coefficients.len()).rev() {
                    let falling: f64 = (j - order + 1..=j).map(|m| m as f64).product();
                    acc = acc * t + coefficients[j] * falling;
                }
                acc
            }
        }
    }
}

/// A sum of analytic terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSignal {
    pub terms: Vec<SignalTerm>,
}

impl TestSignal {
    pub fn new(terms: Vec<SignalTerm>) -> Self {
        TestSignal { terms }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.derivative(0, t)
    }

    /// `y^{(order)}(t)`, exact.
    pub fn derivative(&self, order: usize, t: f64) -> f64 {
        self.terms.iter().map(|term| term.derivative(order, t)).sum()
    }

    /// `[y(t), ẏ(t), …, y^{(up_to)}(t)]`.
    pub fn derivative_stack(&self, up_to: usize, t: f64) -> Vec<f64> {
        (0..=up_to).map(|i| self.derivative(i, t)).collect()
    }

    /// Supremum of `|y^{(order)}|` over `t ≥ 0`.
    ///
    /// Sinusoids at the same frequency are merged into one phasor first, then
    /// the amplitudes of distinct frequencies are summed. A polynomial whose
    /// `order`-th derivative is not constant is unbounded.
    pub fn derivative_bound(&self, order: usize) -> f64 {
        let mut phasors: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        let mut constant = 0.0;
        let mut poly_unbounded = false;
        for term in &self.terms {
            match *term {
                SignalTerm::Cosine { amplitude, frequency } => {
                    phasors.entry(frequency.abs().to_bits()).or_default().0 += amplitude;
                }
                SignalTerm::Sine { amplitude, frequency } => {
                    // sin(−ωt) = −sin(ωt)
                    let a = if frequency < 0.0 { -amplitude } else { amplitude };
                    phasors.entry(frequency.abs().to_bits()).or_default().1 += a;
                }
                SignalTerm::Linear { amplitude } => {
                    if order == 1 {
                        constant += amplitude;
                    } else if order == 0 {
                        poly_unbounded |= amplitude != 0.0;
                    }
                }
                SignalTerm::Polynomial { ref coefficients } => {
                    let last_nonzero = coefficients.iter().rposition(|c| *c != 0.0);
                    if let Some(deg) = last_nonzero {
                        if deg > order {
                            poly_unbounded = true;
                        } else if deg == order {
                            let falling: f64 = (1..=order).map(|m| m as f64).product();
                            constant += coefficients[deg] * falling;
                        }
                    }
                }
            }
        }
        if poly_unbounded {
            return f64::INFINITY;
        }
        let oscillating: f64 = phasors
            .iter()
            .map(|(bits, (a, b))| {
                let w = f64::from_bits(*bits);
                if w == 0.0 {
                    0.0
                } else {
                    w.powi(order as i32) * a.hypot(*b)
                }
            })
            .sum();
        // Zero-frequency cosines are constants.
        let dc: f64 = if order == 0 {
            phasors.get(&0.0f64.to_bits()).map(|p| p.0).unwrap_or(0.0)
        } else {
            0.0
        };
        oscillating + (constant + dc).abs()
    }
}

/// Exact supremum of `|y^{(order)}|` for the supported term classes.
pub fn derivative_bound(sig: &TestSignal, order: usize) -> f64 {
    sig.derivative_bound(order)
}

/// A warning when the configured class bound `L` is below the signal's
/// actual `sup |y^{(n+1)}|`.
pub fn membership_warning(sig: &TestSignal, order: usize, bound: f64) -> Option<String> {
    let actual = sig.derivative_bound(order);
    (actual > bound * (1.0 + 1e-12)).then(|| {
        format!(
            "signal is outside the configured class: sup|y^({order})| = {actual:.6} exceeds L = {bound}"
        )
    })
}

/// Names accepted by [`make_preset`].
pub const PRESET_NAMES: [&str; 5] = ["fig1a", "fig1b", "fig1c", "fig1d", "fig2"];

/// The signals of the two worked examples.
///
/// `fig1a` is `0.75 cos t + 0.0025 sin 10t + t` and also drives `fig1b` and
/// `fig1d`; `fig1c` is `0.1 cos 10t + 0.1 sin 10t + t`; `fig2` is
/// `0.75 cos t + 0.025 sin 10t + t`.
pub fn make_preset(name: &str) -> Result<TestSignal> {
    let cos = |a, w| SignalTerm::Cosine {
        amplitude: a,
        frequency: w,
    };
    let sin = |a, w| SignalTerm::Sine {
        amplitude: a,
        frequency: w,
    };
    let ramp = SignalTerm::Linear { amplitude: 1.0 };
    let terms = match name {
        "fig1a" | "fig1b" | "fig1d" => vec![cos(0.75, 1.0), sin(0.0025, 10.0), ramp],
        "fig1c" => vec![cos(0.1, 10.0), sin(0.1, 10.0), ramp],
        "fig2" => vec![cos(0.75, 1.0), sin(0.025, 10.0), ramp],
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(TestSignal::new(terms))
}

/// Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub std_dev: f64,
    pub seed: u64,
}

const NOISE_BLOCK: u64 = 1024;

/// Noise samples `ν_k` indexed by integration-grid step `k`.
///
/// Samples come in blocks of 1024, each drawn from its own ChaCha8 stream, so
/// any `ν_k` can be produced without replaying earlier steps.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    spec: NoiseSpec,
    dist: Option<Normal<f64>>,
    block: u64,
    cache: Vec<f64>,
}

impl NoiseStream {
    pub fn new(spec: NoiseSpec) -> Result<Self> {
        if !(spec.std_dev >= 0.0) || !spec.std_dev.is_finite() {
            return Err(Error::invalid(
                "std_dev",
                format!("must be non-negative, got {}", spec.std_dev),
            ));
        }
        let dist = if spec.std_dev > 0.0 {
            Some(Normal::new(0.0, spec.std_dev).map_err(|e| Error::invalid("std_dev", e.to_string()))?)
        } else {
            None
        };
        Ok(NoiseStream {
            spec,
            dist,
            block: u64::MAX,
            cache: Vec::new(),
        })
    }

    pub fn spec(&self) -> NoiseSpec {
        self.spec
    }

    pub fn sample(&mut self, k: u64) -> f64 {
        let Some(dist) = self.dist else {
            return 0.0;
        };
        let block = k / NOISE_BLOCK;
        if block != self.block {
            let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
            rng.set_stream(block);
            self.cache.clear();
            self.cache.extend((0..NOISE_BLOCK).map(|_| rng.sample(dist)));
            self.block = block;
        }
        self.cache[(k % NOISE_BLOCK) as usize]
    }
}

/// A signal plus optional noise: what the differentiator actually sees.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub signal: TestSignal,
    noise: Option<NoiseStream>,
}

impl Measurement {
    pub fn new(signal: TestSignal, noise: Option<NoiseSpec>) -> Result<Self> {
        Ok(Measurement {
            signal,
            noise: noise.map(NoiseStream::new).transpose()?,
        })
    }

    pub fn noise_spec(&self) -> Option<NoiseSpec> {
        self.noise.as_ref().map(|n| n.spec())
    }

    /// Noise draw for grid step `k` (zero without noise).
    pub fn noise(&mut self, k: u64) -> f64 {
        self.noise.as_mut().map_or(0.0, |n| n.sample(k))
    }

    /// `y(t) + ν_k`.
    pub fn sample(&mut self, k: u64, t: f64) -> f64 {
        sample_measurement(&self.signal, self.noise.as_mut(), k, t)
    }
}

/// `y(t) + ν_k`, or exactly `y(t)` without noise.
pub fn sample_measurement(sig: &TestSignal, noise: Option<&mut NoiseStream>, k: u64, t: f64) -> f64 {
    let y = sig.value(t);
    match noise {
        Some(n) if n.spec.std_dev > 0.0 => y + n.sample(k),
        _ => y,
    }
}
