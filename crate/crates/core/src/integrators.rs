//! Exponential Euler (mild-solution) time stepping.
//!
//! The linear stiff part is handled exactly through the per-mode evolution
//! multipliers; reaction terms, the first-order transport term, and the
//! noise are explicit with left-endpoint (Ito-consistent) coefficient clocks.
//! One update over a step [r, r + h] reads
//!
//! `v <- U(r+h, r) [ v + P_K(G dW) ] + h P_K[ B(r, .) + L(r) . ]`.
//!
//! The fast component is always advanced in its own (fast) time; the coupled
//! system rescales the clock by the scale ratio, which makes the frozen and
//! coupled code paths share keys, so paths can be coupled through the noise.

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::noise::{Branch, NoiseSpec};
use crate::spectral::{evolution_multipliers, FieldState, SpectralModel, TimeDependentOperator};

/// Sup-norm guard; dissipative configs stay O(1), so tripping it means a
/// misconfigured run rather than an interesting trajectory.
pub const BLOWUP_GUARD: f64 = 1e6;

/// The fast equation with a frozen (or slowly updated) slow argument.
pub struct FastSystem<'a> {
    pub model: &'a SpectralModel,
    pub op: &'a TimeDependentOperator,
    pub coeffs: &'a CoefficientSet,
    /// Fixed damping added to the diffusion operator.
    pub damping: f64,
    /// Time-constant linear part of b2 in the fast variable, absorbed into
    /// the exponential multiplier.
    absorbed_linear: f64,
}

impl<'a> FastSystem<'a> {
    pub fn new(
        model: &'a SpectralModel,
        op: &'a TimeDependentOperator,
        coeffs: &'a CoefficientSet,
        damping: f64,
    ) -> Self {
        FastSystem {
            model,
            op,
            coeffs,
            damping,
            absorbed_linear: coeffs.fast_linear_constant(),
        }
    }

    /// The damping shift carried by the exponential multiplier.
    pub fn effective_shift(&self) -> f64 {
        self.damping - self.absorbed_linear
    }
}

/// Scratch buffers for one trajectory; reused across steps.
pub struct FastScratch {
    v_nodal: Vec<f64>,
    drift_nodal: Vec<f64>,
    drift_modes: Vec<f64>,
    deriv_nodal: Vec<f64>,
    transport_nodal: Vec<f64>,
    noise_modes: Vec<f64>,
    noise_nodal: Vec<f64>,
    xi: Vec<f64>,
    mults: Vec<f64>,
    /// Cached multipliers, keyed by (step width, damping shift); valid when
    /// the modulation is constant in time.
    cached_mults: Option<(f64, f64, Vec<f64>)>,
}

impl FastScratch {
    pub fn new(model: &SpectralModel) -> Self {
        let n = model.n_nodes();
        let k = model.k_modes();
        FastScratch {
            v_nodal: vec![0.0; n],
            drift_nodal: vec![0.0; n],
            drift_modes: vec![0.0; k],
            deriv_nodal: vec![0.0; n],
            transport_nodal: vec![0.0; n],
            noise_modes: vec![0.0; k],
            noise_nodal: vec![0.0; n],
            xi: vec![0.0; k],
            mults: vec![0.0; k],
            cached_mults: None,
        }
    }
}

impl<'a> FastSystem<'a> {
    fn multipliers(&self, tau: f64, h: f64, scratch: &mut FastScratch) {
        let shift = self.effective_shift();
        if self.op.gamma.is_constant() {
            if let Some((ch, cs, m)) = &scratch.cached_mults {
                if *ch == h && *cs == shift {
                    scratch.mults.copy_from_slice(m);
                    return;
                }
            }
            evolution_multipliers(self.op, self.model, tau, tau + h, shift, 1.0, &mut scratch.mults);
            scratch.cached_mults = Some((h, shift, scratch.mults.clone()));
        } else {
            evolution_multipliers(self.op, self.model, tau, tau + h, shift, 1.0, &mut scratch.mults);
        }
    }

    /// One exponential Euler step of the fast equation over [tau, tau + h]
    /// in fast time. `x_nodal` is the frozen slow argument on the nodes;
    /// noise is keyed by (branch, step_key). Returns the sup-norm of the
    /// state at the start of the step.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        v_modes: &mut [f64],
        x_nodal: &[f64],
        tau: f64,
        h: f64,
        spec: &NoiseSpec,
        step_key: u64,
        scratch: &mut FastScratch,
    ) -> Result<f64> {
        let model = self.model;
        let n = model.n_nodes();
        let k = model.k_modes();
        model.to_nodal(v_modes, &mut scratch.v_nodal);
        let sup = scratch
            .v_nodal
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !sup.is_finite() || sup > BLOWUP_GUARD {
            return Err(Error::BlowUp {
                context: format!("fast equation, stream {}", spec.stream),
                time: tau,
                norm: sup,
                guard: BLOWUP_GUARD,
            });
        }

        // Reaction drift (minus the absorbed linear part) plus optional
        // transport, on the nodes.
        let c_lin = self.absorbed_linear;
        for j in 0..n {
            scratch.drift_nodal[j] =
                self.coeffs
                    .b2_eval_residual(tau, x_nodal[j], scratch.v_nodal[j], c_lin);
        }
        if self.op.has_transport() {
            model.deriv_to_nodal(v_modes, &mut scratch.deriv_nodal);
            self.op.transport_at(tau, &mut scratch.transport_nodal);
            for j in 0..n {
                scratch.drift_nodal[j] += scratch.transport_nodal[j] * scratch.deriv_nodal[j];
            }
        }
        model.to_modes(&scratch.drift_nodal, &mut scratch.drift_modes);

        // Noise block, projected to the retained modes.
        let branch = Branch::for_time(tau);
        spec.standard_normals(branch, step_key, &mut scratch.xi);
        let sqrt_h = h.sqrt();
        if self.coeffs.g2.is_state_independent() {
            let g = self.coeffs.g2_eval(tau, 0.0);
            for kk in 0..k {
                scratch.noise_modes[kk] = g * model.noise_lambdas[kk] * sqrt_h * scratch.xi[kk];
            }
        } else {
            for kk in 0..k {
                scratch.noise_modes[kk] = model.noise_lambdas[kk] * sqrt_h * scratch.xi[kk];
            }
            model.to_nodal(&scratch.noise_modes, &mut scratch.noise_nodal);
            for j in 0..n {
                scratch.noise_nodal[j] *= self.coeffs.g2_eval(tau, scratch.v_nodal[j]);
            }
            model.to_modes(&scratch.noise_nodal, &mut scratch.noise_modes);
        }

        self.multipliers(tau, h, scratch);
        for kk in 0..k {
            v_modes[kk] = scratch.mults[kk] * (v_modes[kk] + scratch.noise_modes[kk])
                + h * scratch.drift_modes[kk];
        }
        Ok(sup)
    }
}

/// The slow equation: autonomous diffusion operator, reaction drift supplied
/// by the caller per step.
pub struct SlowSystem<'a> {
    pub model: &'a SpectralModel,
}

pub struct SlowScratch {
    decay: Vec<f64>,
    decay_h: f64,
    u_nodal: Vec<f64>,
    noise_modes: Vec<f64>,
    noise_nodal: Vec<f64>,
    xi: Vec<f64>,
}

impl SlowScratch {
    pub fn new(model: &SpectralModel) -> Self {
        SlowScratch {
            decay: vec![0.0; model.k_modes()],
            decay_h: f64::NAN,
            u_nodal: vec![0.0; model.n_nodes()],
            noise_modes: vec![0.0; model.k_modes()],
            noise_nodal: vec![0.0; model.n_nodes()],
            xi: vec![0.0; model.k_modes()],
        }
    }
}

impl<'a> SlowSystem<'a> {
    /// One exponential Euler step over [t, t + h] with the drift modes
    /// already assembled by the caller (reaction or averaged drift).
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        u_modes: &mut [f64],
        drift_modes: &[f64],
        g1: impl Fn(f64) -> f64,
        g1_state_independent: bool,
        h: f64,
        spec: &NoiseSpec,
        step_key: u64,
        scratch: &mut SlowScratch,
    ) -> Result<()> {
        let model = self.model;
        let k = model.k_modes();
        if scratch.decay_h != h {
            for kk in 0..k {
                scratch.decay[kk] = (-model.alphas[kk] * h).exp();
            }
            scratch.decay_h = h;
        }
        spec.standard_normals(Branch::Forward, step_key, &mut scratch.xi);
        let sqrt_h = h.sqrt();
        if g1_state_independent {
            let g = g1(0.0);
            for kk in 0..k {
                scratch.noise_modes[kk] = g * model.noise_lambdas[kk] * sqrt_h * scratch.xi[kk];
            }
        } else {
            for kk in 0..k {
                scratch.noise_modes[kk] = model.noise_lambdas[kk] * sqrt_h * scratch.xi[kk];
            }
            model.to_nodal(u_modes, &mut scratch.u_nodal);
            model.to_nodal(&scratch.noise_modes, &mut scratch.noise_nodal);
            for j in 0..model.n_nodes() {
                scratch.noise_nodal[j] *= g1(scratch.u_nodal[j]);
            }
            model.to_modes(&scratch.noise_nodal, &mut scratch.noise_modes);
        }
        for kk in 0..k {
            u_modes[kk] = scratch.decay[kk] * (u_modes[kk] + scratch.noise_modes[kk])
                + h * drift_modes[kk];
        }
        Ok(())
    }
}

/// Sampled trajectory output. Coupled runs fill both components; frozen-fast
/// runs leave the slow vectors empty, averaged runs the fast ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub slow_modes: Vec<Vec<f64>>,
    pub fast_modes: Vec<Vec<f64>>,
    pub slow_sup: Vec<f64>,
    pub fast_sup: Vec<f64>,
}

impl TrajectoryRecord {
    fn push_fast(&mut self, t: f64, modes: &[f64], sup: f64) -> Result<()> {
        if !sup.is_finite() || modes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("fast state at t = {t}")));
        }
        self.times.push(t);
        self.fast_modes.push(modes.to_vec());
        self.fast_sup.push(sup);
        Ok(())
    }

    pub fn final_fast(&self, n_nodes: usize) -> Option<FieldState> {
        self.fast_modes
            .last()
            .map(|m| FieldState::from_modes(m.clone(), n_nodes))
    }

    pub fn final_slow(&self, n_nodes: usize) -> Option<FieldState> {
        self.slow_modes
            .last()
            .map(|m| FieldState::from_modes(m.clone(), n_nodes))
    }
}

/// How the frozen-fast integrator reports its path.
#[derive(Debug, Clone, Copy)]
pub enum RecordMode {
    /// Keep only the terminal state.
    Terminal,
    /// Keep every m-th state (m >= 1) plus the terminal one.
    Thinned(usize),
}

/// Integrate the fast equation with frozen slow argument from s to t in fast
/// time, with `n_steps` uniform steps. Noise keys are local step indices, the
/// branch follows the sign of the running time, so runs with negative starts
/// draw from the backward extension of the two-sided process.
#[allow(clippy::too_many_arguments)]
pub fn integrate_fast_frozen(
    sys: &FastSystem,
    x: &FieldState,
    s: f64,
    t: f64,
    y: &FieldState,
    n_steps: usize,
    spec: &NoiseSpec,
    record: RecordMode,
) -> Result<TrajectoryRecord> {
    if t < s {
        return Err(Error::invalid("fast run requires s <= t"));
    }
    if n_steps == 0 {
        return Err(Error::invalid("fast run needs at least one step"));
    }
    let model = sys.model;
    let mut x_nodal = x.clone();
    let x_nodal = x_nodal.nodal(model).to_vec();
    let mut v = y.clone();
    let mut v_modes = v.modes(model).to_vec();
    let h = (t - s) / n_steps as f64;
    let mut scratch = FastScratch::new(model);
    let mut rec = TrajectoryRecord::default();
    let stride = match record {
        RecordMode::Terminal => usize::MAX,
        RecordMode::Thinned(m) => m.max(1),
    };
    for i in 0..n_steps {
        let tau = s + i as f64 * h;
        let pre_modes = if i % stride == 0 && !matches!(record, RecordMode::Terminal) {
            Some(v_modes.clone())
        } else {
            None
        };
        let sup = sys.step(&mut v_modes, &x_nodal, tau, h, spec, i as u64, &mut scratch)?;
        if let Some(modes) = pre_modes {
            // `sup` is the norm at the start of the step, matching `modes`.
            rec.push_fast(tau, &modes, sup)?;
        }
    }
    // Terminal state.
    let mut v_final = FieldState::from_modes(v_modes.clone(), model.n_nodes());
    let sup = v_final.sup_norm(model);
    if !sup.is_finite() || sup > BLOWUP_GUARD {
        return Err(Error::BlowUp {
            context: format!("fast equation, stream {}", spec.stream),
            time: t,
            norm: sup,
            guard: BLOWUP_GUARD,
        });
    }
    rec.push_fast(t, &v_modes, sup)?;
    Ok(rec)
}

/// Convenience wrapper returning only the terminal state of a frozen run.
#[allow(clippy::too_many_arguments)]
pub fn fast_terminal_state(
    sys: &FastSystem,
    x: &FieldState,
    s: f64,
    t: f64,
    y: &FieldState,
    n_steps: usize,
    spec: &NoiseSpec,
) -> Result<FieldState> {
    let rec = integrate_fast_frozen(sys, x, s, t, y, n_steps, spec, RecordMode::Terminal)?;
    Ok(rec.final_fast(sys.model.n_nodes()).expect("terminal state recorded"))
}

/// Time-stepping parameters of the coupled system.
#[derive(Debug, Clone, Copy)]
pub struct CoupledStepping {
    pub epsilon: f64,
    pub dt_macro: f64,
    /// Fast step rule dt_fast = min(dt_macro, c_dt * epsilon), in sim time.
    pub c_dt: f64,
    pub horizon: f64,
}

impl CoupledStepping {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config(format!("epsilon = {} outside (0, 1]", self.epsilon)));
        }
        if self.dt_macro <= 0.0 || self.horizon <= 0.0 {
            return Err(Error::config("dt_macro and horizon must be positive"));
        }
        if !(self.c_dt > 0.0 && self.c_dt <= 0.1) {
            return Err(Error::config(format!("c_dt = {} outside (0, 0.1]", self.c_dt)));
        }
        Ok(())
    }

    pub fn dt_fast(&self) -> f64 {
        self.dt_macro.min(self.c_dt * self.epsilon)
    }

    pub fn micro_per_macro(&self) -> usize {
        (self.dt_macro / self.dt_fast() - 1e-12).ceil().max(1.0) as usize
    }

    pub fn n_macro(&self) -> usize {
        (self.horizon / self.dt_macro).round().max(1.0) as usize
    }
}

/// Observer invoked at every macro grid point (including the initial and
/// final time) with the current slow and fast mode coefficients.
pub trait CoupledObserver {
    fn observe(&mut self, t: f64, u_modes: &[f64], v_modes: &[f64]);
}

impl<F: FnMut(f64, &[f64], &[f64])> CoupledObserver for F {
    fn observe(&mut self, t: f64, u_modes: &[f64], v_modes: &[f64]) {
        self(t, u_modes, v_modes)
    }
}

/// Integrate the coupled slow-fast system on [0, horizon].
///
/// Macro steps advance the slow component with the reaction drift evaluated
/// at the left endpoint; the fast component runs `micro_per_macro` substeps
/// of its own clock (fast time = sim time / epsilon) with the slow argument
/// frozen at the macro left endpoint. Fast-noise keys count micro steps
/// globally, so runs at different epsilon with the same stream share the
/// underlying Wiener path in fast time.
#[allow(clippy::too_many_arguments)]
pub fn integrate_coupled(
    slow: &SlowSystem,
    fast: &FastSystem,
    coeffs: &CoefficientSet,
    stepping: &CoupledStepping,
    x0: &FieldState,
    y0: &FieldState,
    spec_q1: &NoiseSpec,
    spec_q2: &NoiseSpec,
    record_every: usize,
    mut observer: Option<&mut dyn CoupledObserver>,
) -> Result<TrajectoryRecord> {
    stepping.validate()?;
    let model = slow.model;
    debug_assert_eq!(model.n_nodes(), fast.model.n_nodes());
    let n_macro = stepping.n_macro();
    let n_micro = stepping.micro_per_macro();
    let h_macro = stepping.dt_macro;
    let h_tau = h_macro / n_micro as f64 / stepping.epsilon;

    let mut u = x0.clone();
    let mut u_modes = u.modes(model).to_vec();
    let mut v = y0.clone();
    let mut v_modes = v.modes(fast.model).to_vec();

    let mut fast_scratch = FastScratch::new(fast.model);
    let mut slow_scratch = SlowScratch::new(model);
    let mut u_nodal = vec![0.0; model.n_nodes()];
    let mut v_nodal = vec![0.0; model.n_nodes()];
    let mut drift_nodal = vec![0.0; model.n_nodes()];
    let mut drift_modes = vec![0.0; model.k_modes()];

    let mut rec = TrajectoryRecord::default();
    let record_stride = record_every.max(1);
    let mut micro_counter: u64 = 0;
    let g1_const = coeffs.g1.is_state_independent();

    for i in 0..=n_macro {
        let t = i as f64 * h_macro;
        model.to_nodal(&u_modes, &mut u_nodal);
        fast.model.to_nodal(&v_modes, &mut v_nodal);
        let u_sup = u_nodal.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let v_sup = v_nodal.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if !u_sup.is_finite() || u_sup > BLOWUP_GUARD {
            return Err(Error::BlowUp {
                context: format!("slow equation, stream {}", spec_q1.stream),
                time: t,
                norm: u_sup,
                guard: BLOWUP_GUARD,
            });
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs.observe(t, &u_modes, &v_modes);
        }
        if i % record_stride == 0 || i == n_macro {
            if u_modes.iter().chain(v_modes.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("coupled state at t = {t}")));
            }
            rec.times.push(t);
            rec.slow_modes.push(u_modes.clone());
            rec.fast_modes.push(v_modes.clone());
            rec.slow_sup.push(u_sup);
            rec.fast_sup.push(v_sup);
        }
        if i == n_macro {
            break;
        }

        // Slow reaction drift at the left endpoint.
        for j in 0..model.n_nodes() {
            drift_nodal[j] = coeffs.b1_eval(u_nodal[j], v_nodal[j]);
        }
        model.to_modes(&drift_nodal, &mut drift_modes);

        // Fast substeps with the slow argument frozen at u(t).
        for j in 0..n_micro {
            let tau = (t + j as f64 * h_macro / n_micro as f64) / stepping.epsilon;
            fast.step(
                &mut v_modes,
                &u_nodal,
                tau,
                h_tau,
                spec_q2,
                micro_counter,
                &mut fast_scratch,
            )?;
            micro_counter += 1;
        }

        slow.step(
            &mut u_modes,
            &drift_modes,
            |s| coeffs.g1_eval(s),
            g1_const,
            h_macro,
            spec_q1,
            i as u64,
            &mut slow_scratch,
        )?;
    }
    Ok(rec)
}

/// Averaged drift supplied to the averaged-equation integrator.
pub trait DriftOracle: Sync {
    /// Mode coefficients of the averaged drift at the given slow state.
    fn eval(&self, u: &mut FieldState, model: &SpectralModel) -> Result<Vec<f64>>;

    fn tag(&self) -> &'static str;
}

/// Integrate the averaged slow equation on [0, horizon] with the drift
/// evaluated once per macro step. Sharing `spec_q1` with a coupled run gives
/// the common-noise coupling used by the convergence experiment.
#[allow(clippy::too_many_arguments)]
pub fn integrate_averaged(
    slow: &SlowSystem,
    coeffs: &CoefficientSet,
    oracle: &dyn DriftOracle,
    dt_macro: f64,
    horizon: f64,
    x0: &FieldState,
    spec_q1: &NoiseSpec,
    record_every: usize,
) -> Result<TrajectoryRecord> {
    if dt_macro <= 0.0 || horizon <= 0.0 {
        return Err(Error::invalid("dt_macro and horizon must be positive"));
    }
    let model = slow.model;
    let n_macro = (horizon / dt_macro).round().max(1.0) as usize;
    let mut u = x0.clone();
    let mut u_modes = u.modes(model).to_vec();
    let mut slow_scratch = SlowScratch::new(model);
    let mut rec = TrajectoryRecord::default();
    let record_stride = record_every.max(1);
    let g1_const = coeffs.g1.is_state_independent();

    for i in 0..=n_macro {
        let t = i as f64 * dt_macro;
        let mut state = FieldState::from_modes(u_modes.clone(), model.n_nodes());
        let sup = state.sup_norm(model);
        if !sup.is_finite() || sup > BLOWUP_GUARD {
            return Err(Error::BlowUp {
                context: format!("averaged equation, stream {}", spec_q1.stream),
                time: t,
                norm: sup,
                guard: BLOWUP_GUARD,
            });
        }
        if i % record_stride == 0 || i == n_macro {
            rec.times.push(t);
            rec.slow_modes.push(u_modes.clone());
            rec.slow_sup.push(sup);
        }
        if i == n_macro {
            break;
        }
        let drift_modes = oracle.eval(&mut state, model)?;
        slow.step(
            &mut u_modes,
            &drift_modes,
            |s| coeffs.g1_eval(s),
            g1_const,
            dt_macro,
            spec_q1,
            i as u64,
            &mut slow_scratch,
        )?;
    }
    Ok(rec)
}

/// Log-log regression of ensemble increment moments against the lag:
/// fits `log E|u(r + lag) - u(r)|^p ~ p gamma log(lag)` and returns the
/// fitted exponent with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct RegularityFit {
    pub exponent: f64,
    pub exponent_se: f64,
    pub r_squared: f64,
}

/// `trajectories` must share their time grid; lags are in units of grid
/// spacing.
pub fn increment_regularity_probe(
    trajectories: &[TrajectoryRecord],
    p: f64,
    lag_steps: &[usize],
) -> Result<RegularityFit> {
    if trajectories.is_empty() || lag_steps.len() < 3 {
        return Err(Error::invalid("need trajectories and at least 3 lags"));
    }
    let times = &trajectories[0].times;
    if times.len() < lag_steps.iter().max().unwrap() + 2 {
        return Err(Error::invalid("trajectory too short for the requested lags"));
    }
    let mut log_lags = Vec::new();
    let mut log_moments = Vec::new();
    for &lag in lag_steps {
        if lag == 0 {
            continue;
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for traj in trajectories {
            let path = &traj.slow_modes;
            for r in (0..path.len() - lag).step_by(lag.max(1)) {
                let a = &path[r];
                let b = &path[r + lag];
                // Sup over modes is comparable to the nodal sup for
                // band-limited fields; the exponent is what matters here.
                let diff = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                acc += diff.powf(p);
                count += 1;
            }
        }
        let moment = acc / count as f64;
        if moment > 0.0 {
            log_lags.push(((times[lag] - times[0]).abs()).ln());
            log_moments.push(moment.ln());
        }
    }
    if log_lags.len() < 3 {
        return Err(Error::invalid("not enough non-degenerate lags"));
    }
    let fit = crate::stats::fit_line(&log_lags, &log_moments);
    Ok(RegularityFit {
        exponent: fit.slope / p,
        exponent_se: fit.slope_se / p,
        r_squared: fit.r_squared,
    })
}
