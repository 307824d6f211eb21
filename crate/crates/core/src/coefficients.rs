//! Reaction and diffusion coefficient registry and the composition
//! (Nemytskii) operators they induce on fields.
//!
//! Reaction coefficients are polynomials in (slow, fast) values whose scalar
//! coefficients are almost-periodic time signals; diffusion coefficients are
//! a time signal plus a bounded oscillation in the state. This family is
//! closed under the slow-variable clamp used for localization, covers every
//! validation config, and serializes losslessly.

use crate::error::{Error, Result};
use crate::signals::APSignal;
use crate::spectral::{FieldState, SpectralModel};
use serde::{Deserialize, Serialize};

/// One monomial `coeff(t) * slow^slow_pow * fast^fast_pow`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub coeff: APSignal,
    pub slow_pow: u32,
    pub fast_pow: u32,
}

impl PolyTerm {
    pub fn constant(c: f64, slow_pow: u32, fast_pow: u32) -> Self {
        PolyTerm {
            coeff: APSignal::constant(c),
            slow_pow,
            fast_pow,
        }
    }
}

/// Reaction coefficient `b(t, slow, fast) = sum_i c_i(t) slow^p_i fast^q_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReactionCoeff {
    pub terms: Vec<PolyTerm>,
}

impl ReactionCoeff {
    pub fn new(terms: Vec<PolyTerm>) -> Self {
        ReactionCoeff { terms }
    }

    pub fn zero() -> Self {
        ReactionCoeff { terms: Vec::new() }
    }

    pub fn eval(&self, t: f64, slow: f64, fast: f64) -> f64 {
        let mut acc = 0.0;
        for term in &self.terms {
            acc += term.coeff.evaluate(t)
                * slow.powi(term.slow_pow as i32)
                * fast.powi(term.fast_pow as i32);
        }
        acc
    }

    pub fn is_time_independent(&self) -> bool {
        self.terms.iter().all(|t| t.coeff.is_constant())
    }

    pub fn depends_on_fast(&self) -> bool {
        self.terms
            .iter()
            .any(|t| t.fast_pow > 0 && t.coeff.amplitude_bound() > 0.0)
    }

    pub fn depends_on_slow(&self) -> bool {
        self.terms
            .iter()
            .any(|t| t.slow_pow > 0 && t.coeff.amplitude_bound() > 0.0)
    }

    pub fn max_slow_pow(&self) -> u32 {
        self.terms.iter().map(|t| t.slow_pow).max().unwrap_or(0)
    }

    pub fn max_fast_pow(&self) -> u32 {
        self.terms.iter().map(|t| t.fast_pow).max().unwrap_or(0)
    }

    /// Monotone check in the fast variable on a sample grid: for all sampled
    /// (t, slow, fast, k > 0), b(t, slow, fast + k) <= b(t, slow, fast).
    /// Returns the worst (most positive) observed increment.
    pub fn fast_monotonicity_defect(&self, radius: f64) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        let times = [0.0, 0.7, 1.9, 3.1, 4.8, 6.2];
        let grid: Vec<f64> = (-8..=8).map(|i| i as f64 * radius / 8.0).collect();
        let bumps = [radius / 16.0, radius / 4.0, radius];
        for &t in &times {
            for &slow in &grid {
                for &fast in &grid {
                    for &k in &bumps {
                        let inc = self.eval(t, slow, fast + k) - self.eval(t, slow, fast);
                        worst = worst.max(inc);
                    }
                }
            }
        }
        worst
    }
}

/// Diffusion coefficient `g(t, sigma) = amplitude(t) + osc_amp * sin(osc_freq * sigma)`.
/// Bounded with Lipschitz constant |osc_amp * osc_freq| in the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionCoeff {
    pub amplitude: APSignal,
    #[serde(default)]
    pub osc_amp: f64,
    #[serde(default)]
    pub osc_freq: f64,
}

impl DiffusionCoeff {
    pub fn constant(g0: f64) -> Self {
        DiffusionCoeff {
            amplitude: APSignal::constant(g0),
            osc_amp: 0.0,
            osc_freq: 0.0,
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn eval(&self, t: f64, sigma: f64) -> f64 {
        self.amplitude.evaluate(t) + self.osc_amp * (self.osc_freq * sigma).sin()
    }

    pub fn lipschitz_constant(&self) -> f64 {
        (self.osc_amp * self.osc_freq).abs()
    }

    pub fn is_state_independent(&self) -> bool {
        self.osc_amp == 0.0
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude.amplitude_bound() == 0.0 && self.osc_amp == 0.0
    }

    pub fn is_time_independent(&self) -> bool {
        self.amplitude.is_constant()
    }
}

/// Which composition operator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nemytskii {
    SlowReaction,
    FastReaction,
    SlowDiffusion,
    FastDiffusion,
}

/// Registered coefficients of one system, with the growth exponents used by
/// the validation layer and the optional slow-variable clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    /// Reaction in the slow equation, b1(slow, fast); time-independent.
    pub b1: ReactionCoeff,
    /// Reaction in the fast equation, b2(t, slow, fast).
    pub b2: ReactionCoeff,
    /// Diffusion in the slow equation, g1(slow); time-independent.
    pub g1: DiffusionCoeff,
    /// Diffusion in the fast equation, g2(t, fast).
    pub g2: DiffusionCoeff,
    /// Growth exponent of b1 in the slow variable.
    pub m1: u32,
    /// Growth exponent of b2 in the fast variable.
    pub m2: u32,
    /// Growth exponent of the local Lipschitz envelope of b1.
    pub theta_growth: f64,
    /// Clamp radius for the slow argument; None leaves coefficients untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slow_clamp: Option<f64>,
}

impl CoefficientSet {
    pub fn validate(&self) -> Result<()> {
        if !self.b1.is_time_independent() {
            return Err(Error::config("b1 must be time-independent"));
        }
        if !self.g1.is_time_independent() {
            return Err(Error::config("g1 must be time-independent"));
        }
        if self.b1.max_fast_pow() > 1 {
            return Err(Error::config(
                "b1 growth in the fast variable must be at most linear",
            ));
        }
        if self.b2.max_slow_pow() > 1 {
            return Err(Error::config(
                "b2 growth in the slow variable must be at most linear",
            ));
        }
        if self.b1.max_slow_pow() > self.m1 {
            return Err(Error::config(format!(
                "b1 slow degree {} exceeds declared m1 = {}",
                self.b1.max_slow_pow(),
                self.m1
            )));
        }
        if self.b2.max_fast_pow() > self.m2 {
            return Err(Error::config(format!(
                "b2 fast degree {} exceeds declared m2 = {}",
                self.b2.max_fast_pow(),
                self.m2
            )));
        }
        let defect = self.b2.fast_monotonicity_defect(4.0);
        if defect > 1e-9 {
            return Err(Error::config(format!(
                "b2 violates the dissipativity sign condition: positive increment {defect:.3e} on the sample grid"
            )));
        }
        Ok(())
    }

    fn clamp_slow(&self, slow: f64) -> f64 {
        match self.slow_clamp {
            Some(n) => slow.clamp(-n, n),
            None => slow,
        }
    }

    pub fn b1_eval(&self, slow: f64, fast: f64) -> f64 {
        self.b1.eval(0.0, self.clamp_slow(slow), fast)
    }

    pub fn b2_eval(&self, t: f64, slow: f64, fast: f64) -> f64 {
        self.b2.eval(t, self.clamp_slow(slow), fast)
    }

    pub fn g1_eval(&self, slow: f64) -> f64 {
        self.g1.eval(0.0, self.clamp_slow(slow))
    }

    pub fn g2_eval(&self, t: f64, fast: f64) -> f64 {
        self.g2.eval(t, fast)
    }

    /// Radial clamp of the slow argument at radius n; the fast-equation
    /// diffusion is left untouched (it never sees the slow variable).
    pub fn truncated(&self, n: f64) -> Result<CoefficientSet> {
        if n <= 0.0 {
            return Err(Error::invalid("truncation radius must be positive"));
        }
        let mut out = self.clone();
        out.slow_clamp = Some(n);
        Ok(out)
    }

    /// Coefficient of the purely linear, time-constant part of b2 in the
    /// fast variable. Integrators absorb it into the exponential multiplier
    /// (the damping-shift rewriting of the fast equation), which makes
    /// linear-decay configs exact in time.
    pub fn fast_linear_constant(&self) -> f64 {
        self.b2
            .terms
            .iter()
            .filter(|t| t.slow_pow == 0 && t.fast_pow == 1 && t.coeff.is_constant())
            .map(|t| t.coeff.offset)
            .sum()
    }

    /// b2 with the absorbed linear part removed.
    pub fn b2_eval_residual(&self, t: f64, slow: f64, fast: f64, c_lin: f64) -> f64 {
        self.b2_eval(t, slow, fast) - c_lin * fast
    }

    /// The time signals entering the fast equation, for almost-periodicity
    /// scans (modulation gamma is tracked by the operator, not here).
    pub fn fast_time_signals(&self) -> Vec<APSignal> {
        let mut signals: Vec<APSignal> = self
            .b2
            .terms
            .iter()
            .map(|t| t.coeff.clone())
            .collect();
        signals.push(self.g2.amplitude.clone());
        signals
    }
}

/// Pointwise composition on the collocation grid. The slow/fast reaction
/// operators consume both field arguments; the diffusion operators consume
/// the matching one.
pub fn nemytskii_apply(
    coeffs: &CoefficientSet,
    which: Nemytskii,
    t: f64,
    slow: &mut FieldState,
    fast: &mut FieldState,
    model: &SpectralModel,
) -> FieldState {
    let n = model.n_nodes();
    let mut out = vec![0.0; n];
    let slow_nodal = slow.nodal(model).to_vec();
    let fast_nodal = fast.nodal(model);
    for j in 0..n {
        out[j] = match which {
            Nemytskii::SlowReaction => coeffs.b1_eval(slow_nodal[j], fast_nodal[j]),
            Nemytskii::FastReaction => coeffs.b2_eval(t, slow_nodal[j], fast_nodal[j]),
            Nemytskii::SlowDiffusion => coeffs.g1_eval(slow_nodal[j]),
            Nemytskii::FastDiffusion => coeffs.g2_eval(t, fast_nodal[j]),
        };
    }
    FieldState::from_nodal(out, model.k_modes())
}

/// Ready-made coefficient sets used across tests and default configs.
pub mod presets {
    use super::*;

    /// b1 = fast, b2 = -fast + c(t) slow, constant diffusions. The averaged
    /// drift has a closed form for this family.
    pub fn linear_validation(c0: f64, c1: f64, omega: f64, g1: f64, g2: f64) -> CoefficientSet {
        let c_signal = if c1 == 0.0 {
            APSignal::constant(c0)
        } else {
            APSignal::sine(c1, omega).with_offset(c0)
        };
        CoefficientSet {
            b1: ReactionCoeff::new(vec![PolyTerm::constant(1.0, 0, 1)]),
            b2: ReactionCoeff::new(vec![
                PolyTerm::constant(-1.0, 0, 1),
                PolyTerm {
                    coeff: c_signal,
                    slow_pow: 1,
                    fast_pow: 0,
                },
            ]),
            g1: DiffusionCoeff::constant(g1),
            g2: DiffusionCoeff::constant(g2),
            m1: 1,
            m2: 1,
            theta_growth: 0.0,
            slow_clamp: None,
        }
    }

    /// Cubic slow reaction -slow^3 + fast over a dissipative cubic fast
    /// reaction -fast^3 - fast + c(t) slow.
    pub fn cubic(c0: f64, c1: f64, omega: f64, g1: f64, g2: f64) -> CoefficientSet {
        let c_signal = if c1 == 0.0 {
            APSignal::constant(c0)
        } else {
            APSignal::sine(c1, omega).with_offset(c0)
        };
        CoefficientSet {
            b1: ReactionCoeff::new(vec![
                PolyTerm::constant(-1.0, 3, 0),
                PolyTerm::constant(1.0, 0, 1),
            ]),
            b2: ReactionCoeff::new(vec![
                PolyTerm::constant(-1.0, 0, 3),
                PolyTerm::constant(-1.0, 0, 1),
                PolyTerm {
                    coeff: c_signal,
                    slow_pow: 1,
                    fast_pow: 0,
                },
            ]),
            g1: DiffusionCoeff::constant(g1),
            g2: DiffusionCoeff::constant(g2),
            m1: 3,
            m2: 3,
            theta_growth: 2.0,
            slow_clamp: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{power_law_lambdas, BoundaryKind};

    fn model() -> SpectralModel {
        SpectralModel::new(
            BoundaryKind::Dirichlet,
            4,
            9,
            std::f64::consts::PI,
            power_law_lambdas(4, 1.0, -1.0),
            3.0,
            0.6,
        )
        .unwrap()
    }

    fn constant_field(m: &SpectralModel, v: f64) -> FieldState {
        FieldState::from_nodal(vec![v; m.n_nodes()], m.k_modes())
    }

    #[test]
    fn cubic_slow_reaction_pointwise() {
        // b1 = -slow^3 + fast at slow = 1, fast = 2 gives 1 everywhere.
        let m = model();
        let coeffs = presets::cubic(0.0, 0.0, 1.0, 0.0, 0.0);
        let mut x = constant_field(&m, 1.0);
        let mut y = constant_field(&m, 2.0);
        let mut out = nemytskii_apply(&coeffs, Nemytskii::SlowReaction, 0.0, &mut x, &mut y, &m);
        for &v in out.nodal(&m) {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn locality_of_composition() {
        let m = model();
        let coeffs = presets::cubic(1.0, 0.5, 1.0, 0.0, 0.0);
        let mut x = FieldState::mode(&m, 0, 0.8);
        let mut y = FieldState::mode(&m, 1, -0.6);
        let mut base =
            nemytskii_apply(&coeffs, Nemytskii::SlowReaction, 0.3, &mut x, &mut y, &m);
        let base_nodal = base.nodal(&m).to_vec();
        // Perturb one node of x and check only that node changes.
        let mut x_pert_nodal = x.nodal(&m).to_vec();
        x_pert_nodal[3] += 0.123;
        let mut xp = FieldState::from_nodal(x_pert_nodal, m.k_modes());
        let mut pert =
            nemytskii_apply(&coeffs, Nemytskii::SlowReaction, 0.3, &mut xp, &mut y, &m);
        let pert_nodal = pert.nodal(&m);
        for j in 0..m.n_nodes() {
            if j == 3 {
                assert!((pert_nodal[j] - base_nodal[j]).abs() > 1e-6);
            } else {
                assert!((pert_nodal[j] - base_nodal[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dissipative_cubic_sign_check() {
        // <B2(t,x,y+k) - B2(t,x,y), k> <= 0 pointwise for the dissipative cubic.
        let m = model();
        let coeffs = presets::cubic(0.5, 0.2, 1.0, 0.0, 0.0);
        let mut worst = f64::NEG_INFINITY;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        for _ in 0..200 {
            let t = next() * 3.0;
            let (x, y, k) = (next(), next(), next());
            let inc = (coeffs.b2_eval(t, x, y + k) - coeffs.b2_eval(t, x, y)) * k;
            worst = worst.max(inc);
        }
        assert!(worst <= 1e-12, "worst pairing {worst}");
        let _ = m;
    }

    #[test]
    fn growth_envelope_of_slow_reaction() {
        // |b1(x, y)| <= c (1 + |x|^m1 + |y|) with a single fitted c over
        // random samples.
        let coeffs = presets::cubic(0.0, 0.0, 1.0, 0.0, 0.0);
        let mut state = 42u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0
        };
        let mut fitted_c = 0.0f64;
        for _ in 0..1000 {
            let (x, y) = (next(), next());
            let v = coeffs.b1_eval(x, y).abs();
            let envelope = 1.0 + x.abs().powi(coeffs.m1 as i32) + y.abs();
            fitted_c = fitted_c.max(v / envelope);
        }
        assert!(fitted_c <= 2.0, "fitted envelope constant {fitted_c}");
    }

    #[test]
    fn validation_rejects_antidissipative_fast_reaction() {
        let mut coeffs = presets::linear_validation(1.0, 0.0, 1.0, 0.0, 0.5);
        coeffs.b2 = ReactionCoeff::new(vec![PolyTerm::constant(1.0, 0, 1)]);
        assert!(matches!(coeffs.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn validation_accepts_presets() {
        presets::linear_validation(1.0, 0.5, 1.0, 0.1, 0.5)
            .validate()
            .unwrap();
        presets::cubic(1.0, 0.5, 1.0, 0.1, 0.5).validate().unwrap();
    }

    #[test]
    fn truncation_identity_inside_radius() {
        let coeffs = presets::cubic(1.0, 0.5, 1.0, 0.1, 0.5);
        let trunc = coeffs.truncated(2.0).unwrap();
        for x in [-1.9f64, -0.5, 0.0, 1.2, 2.0] {
            for y in [-3.0f64, 0.4, 5.0] {
                assert_eq!(coeffs.b1_eval(x, y), trunc.b1_eval(x, y));
                assert_eq!(coeffs.b2_eval(0.7, x, y), trunc.b2_eval(0.7, x, y));
                assert_eq!(coeffs.g1_eval(x), trunc.g1_eval(x));
            }
        }
    }

    #[test]
    fn truncation_clamps_outside_radius() {
        let coeffs = presets::cubic(0.0, 0.0, 1.0, 0.0, 0.0);
        let n = 1.5;
        let trunc = coeffs.truncated(n).unwrap();
        assert_eq!(trunc.b1_eval(2.0 * n, 0.3), coeffs.b1_eval(n, 0.3));
        assert_eq!(trunc.b1_eval(-2.0 * n, 0.3), coeffs.b1_eval(-n, 0.3));
    }

    #[test]
    fn truncation_gives_global_lipschitz_in_slow() {
        // Dense scan of difference quotients in the slow variable: bounded
        // after the clamp, unbounded growth before.
        let coeffs = presets::cubic(0.0, 0.0, 1.0, 0.0, 0.0);
        let trunc = coeffs.truncated(1.0).unwrap();
        let quotient = |c: &CoefficientSet, a: f64, b: f64| {
            (c.b1_eval(a, 0.0) - c.b1_eval(b, 0.0)).abs() / (a - b).abs()
        };
        let mut worst_raw = 0.0f64;
        let mut worst_trunc = 0.0f64;
        for i in 0..400 {
            let a = -10.0 + i as f64 * 0.05;
            let b = a + 0.025;
            worst_raw = worst_raw.max(quotient(&coeffs, a, b));
            worst_trunc = worst_trunc.max(quotient(&trunc, a, b));
        }
        assert!(worst_trunc <= 3.1, "clamped Lipschitz {worst_trunc}");
        assert!(worst_raw > 100.0, "raw growth {worst_raw}");
    }
}
