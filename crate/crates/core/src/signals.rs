//! Almost-periodic scalar signals as finite trigonometric polynomials,
//! their mean values, and translation-set diagnostics.
//!
//! A signal is `f(t) = a0 + sum_j a_j cos(w_j t + p_j)`. Finite trigonometric
//! polynomials are dense in the almost-periodic class, serialize cleanly, and
//! have closed-form antiderivatives and mean values. Relative density of
//! translation sets can only ever be *estimated* on a finite window, so scan
//! results are labelled estimates, never proofs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One harmonic `amplitude * cos(frequency * t + phase)`.
/// Serialized as an `[amplitude, frequency, phase]` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, f64)", into = "(f64, f64, f64)")]
pub struct Harmonic {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl From<(f64, f64, f64)> for Harmonic {
    fn from(t: (f64, f64, f64)) -> Self {
        Harmonic {
            amplitude: t.0,
            frequency: t.1,
            phase: t.2,
        }
    }
}

impl From<Harmonic> for (f64, f64, f64) {
    fn from(h: Harmonic) -> Self {
        (h.amplitude, h.frequency, h.phase)
    }
}

/// Almost-periodic signal: constant offset plus a finite list of harmonics,
/// with an optional declared period when all frequencies are commensurate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APSignal {
    pub offset: f64,
    #[serde(default)]
    pub harmonics: Vec<Harmonic>,
    /// Declared period, if the signal is exactly periodic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
}

impl APSignal {
    pub fn constant(c: f64) -> Self {
        APSignal {
            offset: c,
            harmonics: Vec::new(),
            period: None,
        }
    }

    /// `a sin(w t)` as a phase-shifted cosine.
    pub fn sine(amplitude: f64, frequency: f64) -> Self {
        APSignal {
            offset: 0.0,
            harmonics: vec![Harmonic {
                amplitude,
                frequency,
                phase: -std::f64::consts::FRAC_PI_2,
            }],
            period: Some(2.0 * std::f64::consts::PI / frequency),
        }
    }

    pub fn cosine(amplitude: f64, frequency: f64) -> Self {
        APSignal {
            offset: 0.0,
            harmonics: vec![Harmonic {
                amplitude,
                frequency,
                phase: 0.0,
            }],
            period: Some(2.0 * std::f64::consts::PI / frequency),
        }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn plus(mut self, other: &APSignal) -> Self {
        self.offset += other.offset;
        self.harmonics.extend(other.harmonics.iter().copied());
        self.period = match (self.period, other.period) {
            (Some(a), Some(b)) => common_period(a, b),
            _ => None,
        };
        self
    }

    pub fn is_constant(&self) -> bool {
        self.harmonics.iter().all(|h| h.amplitude == 0.0)
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        let mut v = self.offset;
        for h in &self.harmonics {
            v += h.amplitude * (h.frequency * t + h.phase).cos();
        }
        v
    }

    /// Antiderivative with F(0) = sum a_j sin(p_j)/w_j, so that
    /// `integral(s, t) = antiderivative(t) - antiderivative(s)` exactly.
    pub fn antiderivative(&self, t: f64) -> f64 {
        let mut v = self.offset * t;
        for h in &self.harmonics {
            if h.frequency != 0.0 {
                v += h.amplitude * (h.frequency * t + h.phase).sin() / h.frequency;
            } else {
                v += h.amplitude * h.phase.cos() * t;
            }
        }
        v
    }

    pub fn integral(&self, s: f64, t: f64) -> f64 {
        self.antiderivative(t) - self.antiderivative(s)
    }

    /// Composite-Simpson integral with step at most `max_step`.
    /// The closed form above is exact; this exists to cross-check it and to
    /// integrate signals supplied only through samples elsewhere.
    pub fn integral_simpson(&self, s: f64, t: f64, max_step: f64) -> f64 {
        if t == s {
            return 0.0;
        }
        let span = t - s;
        let mut n = (span.abs() / max_step).ceil() as usize;
        n = n.max(2);
        if n % 2 == 1 {
            n += 1;
        }
        let h = span / n as f64;
        let mut acc = self.evaluate(s) + self.evaluate(t);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * self.evaluate(s + i as f64 * h);
        }
        acc * h / 3.0
    }

    /// Bound `|f(t)| <= |a0| + sum |a_j|`.
    pub fn amplitude_bound(&self) -> f64 {
        self.offset.abs() + self.harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>()
    }

    /// Total oscillation `2 sum |a_j|`; any shift is an almost-period once
    /// the tolerance exceeds this.
    pub fn oscillation_bound(&self) -> f64 {
        2.0 * self.harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>()
    }

    pub fn max_frequency(&self) -> f64 {
        self.harmonics
            .iter()
            .map(|h| h.frequency.abs())
            .fold(0.0, f64::max)
    }

    /// Minimum over a sampled grid; used to validate positivity bounds.
    pub fn sampled_range(&self, t0: f64, t1: f64, samples: usize) -> (f64, f64) {
        let n = samples.max(2);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let t = t0 + (t1 - t0) * i as f64 / (n - 1) as f64;
            let v = self.evaluate(t);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

fn common_period(a: f64, b: f64) -> Option<f64> {
    // Least common multiple for near-commensurate periods; bail out after a
    // bounded search so incommensurate pairs fall back to "no period".
    for i in 1..=64u32 {
        let cand = a * i as f64;
        let ratio = cand / b;
        if (ratio - ratio.round()).abs() < 1e-9 {
            return Some(cand);
        }
    }
    None
}

/// Mean value with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanValue {
    pub value: f64,
    /// `|result(T) - result(T/2)|`; for trigonometric polynomials the exact
    /// boundary-term error is O(1/T).
    pub error_estimate: f64,
}

/// Cesaro average `(1/T) \int_{t0}^{t0+T} f` by closed form.
pub fn mean_value(signal: &APSignal, t_horizon: f64, t0: f64) -> Result<MeanValue> {
    if t_horizon <= 0.0 {
        return Err(Error::invalid("mean_value requires T > 0"));
    }
    let full = signal.integral(t0, t0 + t_horizon) / t_horizon;
    let half = signal.integral(t0, t0 + t_horizon / 2.0) / (t_horizon / 2.0);
    Ok(MeanValue {
        value: full,
        error_estimate: (full - half).abs(),
    })
}

/// Cesaro average of a uniformly sampled path by trapezoid quadrature.
pub fn mean_value_sampled(values: &[f64], dt: f64) -> Result<MeanValue> {
    if values.len() < 3 {
        return Err(Error::invalid("mean_value_sampled needs at least 3 samples"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean_value_sampled input".into()));
    }
    let full = trapezoid_mean(values, dt);
    let half = trapezoid_mean(&values[..values.len().div_ceil(2)], dt);
    Ok(MeanValue {
        value: full,
        error_estimate: (full - half).abs(),
    })
}

fn trapezoid_mean(values: &[f64], dt: f64) -> f64 {
    let n = values.len();
    let mut acc = 0.5 * (values[0] + values[n - 1]);
    for v in &values[1..n - 1] {
        acc += v;
    }
    acc * dt / ((n - 1) as f64 * dt)
}

/// Result of a grid search for almost-periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationScan {
    pub epsilon: f64,
    pub window: f64,
    pub step: f64,
    /// Shifts tau > 0 with sup-discrepancy below epsilon on the sampled grid.
    pub almost_periods: Vec<f64>,
    /// Largest gap between consecutive found shifts (0 and `window` included
    /// as sentinels); an estimate of the inclusion length, only meaningful
    /// when `conclusive`.
    pub inclusion_length_estimate: f64,
    /// False when no shift beyond 0 was found inside the window.
    pub conclusive: bool,
}

/// Scan `tau in (0, window]` on a grid of width `step` for shifts with
/// `sup_t |f(t+tau) - f(t)| < epsilon`, the sup taken over a sampled t-range.
pub fn translation_scan(
    signal: &APSignal,
    epsilon: f64,
    window: f64,
    step: f64,
) -> Result<TranslationScan> {
    if epsilon <= 0.0 || window <= 0.0 || step <= 0.0 {
        return Err(Error::invalid("translation_scan requires positive epsilon, window, step"));
    }
    let max_freq = signal.max_frequency();
    if max_freq > 0.0 && step > std::f64::consts::PI / (4.0 * max_freq) {
        return Err(Error::invalid(format!(
            "scan step {step} does not resolve the fastest frequency {max_freq} (need step <= pi/(4 max w))"
        )));
    }
    let discrepancy = |tau: f64| sup_discrepancy(signal, tau, step);
    let n_tau = (window / step).floor() as usize;
    let mut found = Vec::new();
    for i in 1..=n_tau {
        let tau = i as f64 * step;
        if discrepancy(tau) < epsilon {
            found.push(tau);
        }
    }
    Ok(finish_scan(epsilon, window, step, found))
}

/// Sup of |f(t+tau)-f(t)| over a t-grid covering several slow oscillations.
fn sup_discrepancy(signal: &APSignal, tau: f64, step: f64) -> f64 {
    // t-range: a few multiples of the slowest oscillation present, floor 8.
    let min_freq = signal
        .harmonics
        .iter()
        .map(|h| h.frequency.abs())
        .filter(|f| *f > 0.0)
        .fold(f64::INFINITY, f64::min);
    let t_span = if min_freq.is_finite() {
        (4.0 * 2.0 * std::f64::consts::PI / min_freq).max(8.0)
    } else {
        8.0
    };
    let n = (t_span / step).ceil() as usize;
    let mut sup = 0.0f64;
    for j in 0..=n {
        let t = j as f64 * step;
        sup = sup.max((signal.evaluate(t + tau) - signal.evaluate(t)).abs());
    }
    sup
}

fn finish_scan(epsilon: f64, window: f64, step: f64, found: Vec<f64>) -> TranslationScan {
    let conclusive = !found.is_empty();
    let inclusion_length_estimate = if conclusive {
        let mut max_gap = found[0]; // gap from tau = 0
        for pair in found.windows(2) {
            max_gap = max_gap.max(pair[1] - pair[0]);
        }
        max_gap = max_gap.max(window - found[found.len() - 1]);
        max_gap
    } else {
        window
    };
    TranslationScan {
        epsilon,
        window,
        step,
        almost_periods: found,
        inclusion_length_estimate,
        conclusive,
    }
}

/// Re-check each reported shift at double sampling density.
pub fn recheck_scan(signal: &APSignal, scan: &TranslationScan) -> bool {
    scan.almost_periods
        .iter()
        .all(|&tau| sup_discrepancy(signal, tau, scan.step / 2.0) < scan.epsilon)
}

/// Common translation report for a finite family of signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformApReport {
    pub epsilon: f64,
    pub window: f64,
    pub step: f64,
    /// Shifts in every member's translation set (grid-aligned).
    pub common_periods: Vec<f64>,
    pub inclusion_length_estimate: f64,
    pub conclusive: bool,
    pub per_signal: Vec<TranslationScan>,
}

/// Intersect per-signal translation scans on a shared grid. An empty
/// intersection inside the window is reported as inconclusive, not failure;
/// tau = 0 always qualifies and is represented by the grid step.
pub fn uniform_ap_check(
    family: &[APSignal],
    epsilon: f64,
    window: f64,
    step: f64,
) -> Result<UniformApReport> {
    if family.is_empty() {
        return Err(Error::invalid("uniform_ap_check requires a non-empty family"));
    }
    let scans = family
        .iter()
        .map(|s| translation_scan(s, epsilon, window, step))
        .collect::<Result<Vec<_>>>()?;
    let mut common: Vec<f64> = scans[0].almost_periods.clone();
    for scan in &scans[1..] {
        // Grid-aligned values: match by rounded grid index.
        let keys: std::collections::HashSet<i64> = scan
            .almost_periods
            .iter()
            .map(|&t| (t / step).round() as i64)
            .collect();
        common.retain(|&t| keys.contains(&((t / step).round() as i64)));
    }
    let merged = finish_scan(epsilon, window, step, common);
    Ok(UniformApReport {
        epsilon,
        window,
        step,
        common_periods: merged.almost_periods,
        inclusion_length_estimate: merged.inclusion_length_estimate,
        conclusive: merged.conclusive,
        per_signal: scans,
    })
}
