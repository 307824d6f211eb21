//! Averaged-drift construction: ergodic time-averaging along fast
//! trajectories, measure-averaging over the evolution family, a closed form
//! for the linear validation family, and regularity probes for the
//! resulting drift map.

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::integrators::{DriftOracle, FastScratch, FastSystem};
use crate::measures::{estimate_evolution_measure, MeasureParams};
use crate::noise::NoiseSpec;
use crate::signals::mean_value_sampled;
use crate::spectral::{FieldState, SpectralModel};
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::RwLock;

/// How an averaged-drift value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMethod {
    ErgodicTrajectory,
    MeasureAverage,
    ClosedForm,
}

impl DriftMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            DriftMethod::ErgodicTrajectory => "ergodic-trajectory",
            DriftMethod::MeasureAverage => "measure-average",
            DriftMethod::ClosedForm => "closed-form",
        }
    }
}

/// One estimate of the averaged drift at a fixed slow state.
#[derive(Debug, Clone)]
pub struct AveragedDriftEstimate {
    pub drift: FieldState,
    pub method: DriftMethod,
    /// Averaging horizon used.
    pub horizon: f64,
    /// Half-vs-full horizon difference in the sup-norm.
    pub error_estimate: f64,
}

impl AveragedDriftEstimate {
    /// Growth envelope |drift|_sup <= c (1 + |x|_sup^m1); returns the fitted c.
    pub fn envelope_constant(&mut self, x: &FieldState, m1: u32, model: &SpectralModel) -> f64 {
        let mut xs = x.clone();
        let xn = xs.sup_norm(model);
        self.drift.sup_norm(model) / (1.0 + xn.powi(m1 as i32))
    }
}

/// Parameters for the ergodic (trajectory time-average) estimator.
#[derive(Debug, Clone, Copy)]
pub struct ErgodicParams {
    /// Averaging horizon per path.
    pub horizon: f64,
    /// Start of the averaging window.
    pub s0: f64,
    /// Burn-in before s0.
    pub t_burn: f64,
    pub dt: f64,
    pub n_paths: usize,
}

/// Time-average of the slow reaction along frozen-fast trajectories,
/// ensemble-averaged over paths.
pub fn estimate_bbar_ergodic(
    sys: &FastSystem,
    x: &FieldState,
    params: &ErgodicParams,
    seed: u64,
    stream_base: u64,
) -> Result<AveragedDriftEstimate> {
    let (estimate, _) = ergodic_average_with_deviation(sys, x, params, seed, stream_base, None)?;
    Ok(estimate)
}

/// As [`estimate_bbar_ergodic`], also returning the per-path mean-square
/// sup-norm deviation of the single-path time averages from `reference`
/// (when given), the quantity whose decay in the horizon is checked by the
/// deviation-bound experiments.
pub fn ergodic_average_with_deviation(
    sys: &FastSystem,
    x: &FieldState,
    params: &ErgodicParams,
    seed: u64,
    stream_base: u64,
    reference: Option<&FieldState>,
) -> Result<(AveragedDriftEstimate, f64)> {
    if params.horizon <= 0.0 {
        return Err(Error::invalid("averaging horizon must be positive"));
    }
    if params.n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let model = sys.model;
    let k = model.k_modes();
    struct PathAverage {
        full: Vec<f64>,
        half: Vec<f64>,
    }
    let outputs: Result<Vec<PathAverage>> = (0..params.n_paths)
        .into_par_iter()
        .map(|p| {
            let spec = NoiseSpec::new(seed, stream_base + p as u64);
            let mut scratch = FastScratch::new(model);
            let mut x_clone = x.clone();
            let x_nodal = x_clone.nodal(model).to_vec();
            let s = params.s0 - params.t_burn;
            let t_end = params.s0 + params.horizon;
            let n_steps = (((t_end - s) / params.dt).round() as usize).max(1);
            let h = (t_end - s) / n_steps as f64;
            let mut v_modes = vec![0.0; k];
            let mut b1_nodal = vec![0.0; model.n_nodes()];
            let mut b1_modes = vec![0.0; k];
            let mut v_nodal = vec![0.0; model.n_nodes()];
            // Trapezoid accumulation of B1(x, v) over [s0, s0 + horizon]
            // and over the half horizon for the error estimate.
            let mut acc_full = vec![0.0; k];
            let mut acc_half = vec![0.0; k];
            let mut w_full = 0.0;
            let mut w_half = 0.0;
            let half_end = params.s0 + params.horizon / 2.0;
            for i in 0..=n_steps {
                let tau = s + i as f64 * h;
                if tau >= params.s0 - 1e-12 {
                    model.to_nodal(&v_modes, &mut v_nodal);
                    for j in 0..model.n_nodes() {
                        b1_nodal[j] = sys.coeffs.b1_eval(x_nodal[j], v_nodal[j]);
                    }
                    model.to_modes(&b1_nodal, &mut b1_modes);
                    let at_edge = i == n_steps || tau <= params.s0 + 1e-12;
                    let wf = if at_edge { 0.5 } else { 1.0 };
                    for kk in 0..k {
                        acc_full[kk] += wf * b1_modes[kk];
                    }
                    w_full += wf;
                    if tau <= half_end + 1e-12 {
                        let at_half_edge =
                            tau <= params.s0 + 1e-12 || tau + h > half_end + 1e-12;
                        let wh = if at_half_edge { 0.5 } else { 1.0 };
                        for kk in 0..k {
                            acc_half[kk] += wh * b1_modes[kk];
                        }
                        w_half += wh;
                    }
                }
                if i < n_steps {
                    sys.step(&mut v_modes, &x_nodal, tau, h, &spec, i as u64, &mut scratch)?;
                }
            }
            for kk in 0..k {
                acc_full[kk] /= w_full;
                acc_half[kk] /= w_half;
            }
            Ok(PathAverage {
                full: acc_full,
                half: acc_half,
            })
        })
        .collect();
    let outputs = outputs?;
    let n = outputs.len() as f64;
    let mut mean_full = vec![0.0; k];
    let mut mean_half = vec![0.0; k];
    for out in &outputs {
        for kk in 0..k {
            mean_full[kk] += out.full[kk] / n;
            mean_half[kk] += out.half[kk] / n;
        }
    }
    let mut drift = FieldState::from_modes(mean_full, model.n_nodes());
    let diff: Vec<f64> = drift
        .modes(model)
        .iter()
        .zip(&mean_half)
        .map(|(a, b)| a - b)
        .collect();
    let mut diff_field = FieldState::from_modes(diff, model.n_nodes());
    let error_estimate = diff_field.sup_norm(model);
    let deviation = if let Some(reference) = reference {
        let mut r = reference.clone();
        let r_modes = r.modes(model).to_vec();
        outputs
            .iter()
            .map(|out| {
                let d: Vec<f64> = out.full.iter().zip(&r_modes).map(|(a, b)| a - b).collect();
                let mut f = FieldState::from_modes(d, model.n_nodes());
                let s = f.sup_norm(model);
                s * s
            })
            .sum::<f64>()
            / n
    } else {
        0.0
    };
    Ok((
        AveragedDriftEstimate {
            drift,
            method: DriftMethod::ErgodicTrajectory,
            horizon: params.horizon,
            error_estimate,
        },
        deviation,
    ))
}

/// Parameters for the measure-average estimator.
#[derive(Debug, Clone)]
pub struct MeasureAverageParams {
    /// Times at which the evolution measure is sampled; should span at
    /// least one near-period of the coefficients.
    pub time_grid: Vec<f64>,
    pub measure: MeasureParams,
}

/// Averaged drift through the evolution family: build the measure at each
/// grid time, integrate the slow reaction against it, then take the time
/// mean of the resulting vector-valued signal componentwise.
pub fn estimate_bbar_measure(
    sys: &FastSystem,
    x: &FieldState,
    params: &MeasureAverageParams,
    seed: u64,
    stream_base: u64,
) -> Result<AveragedDriftEstimate> {
    let model = sys.model;
    let k = model.k_modes();
    let grid = &params.time_grid;
    if grid.is_empty() {
        return Err(Error::invalid("time grid must be non-empty"));
    }
    let mut x_clone = x.clone();
    let x_nodal = x_clone.nodal(model).to_vec();
    let mut per_time: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    let mut stream = stream_base;
    for &t in grid {
        let measure = estimate_evolution_measure(sys, x, t, &params.measure, seed, stream)?;
        stream += params.measure.n_members as u64;
        let mut mean_modes = vec![0.0; k];
        let mut b1_nodal = vec![0.0; model.n_nodes()];
        let mut b1_modes = vec![0.0; k];
        for member in &measure.members {
            let mut m = member.clone();
            let v_nodal = m.nodal(model);
            for j in 0..model.n_nodes() {
                b1_nodal[j] = sys.coeffs.b1_eval(x_nodal[j], v_nodal[j]);
            }
            model.to_modes(&b1_nodal, &mut b1_modes);
            for kk in 0..k {
                mean_modes[kk] += b1_modes[kk] / measure.members.len() as f64;
            }
        }
        per_time.push(mean_modes);
    }
    let mut drift_modes = vec![0.0; k];
    let mut error = 0.0f64;
    if grid.len() < 3 {
        // Autonomous families: one or two time points, plain average.
        for row in &per_time {
            for kk in 0..k {
                drift_modes[kk] += row[kk] / per_time.len() as f64;
            }
        }
    } else {
        let dt = grid[1] - grid[0];
        for kk in 0..k {
            let series: Vec<f64> = per_time.iter().map(|row| row[kk]).collect();
            let mv = mean_value_sampled(&series, dt)?;
            drift_modes[kk] = mv.value;
            error = error.max(mv.error_estimate);
        }
    }
    Ok(AveragedDriftEstimate {
        drift: FieldState::from_modes(drift_modes, model.n_nodes()),
        method: DriftMethod::MeasureAverage,
        horizon: grid.last().unwrap() - grid.first().unwrap(),
        error_estimate: error,
    })
}

/// Closed-form averaged drift for the linear validation family
/// b1 = p * fast + (slow-only part), b2 = -a * fast + c(t) * slow with
/// constant modulation: modewise
/// `drift_k = p cbar x_k / (gamma0 alpha_k + damping + a) + (slow part)_k`.
#[derive(Debug, Clone)]
pub struct LinearClosedFormDrift {
    /// Mean of the coupling signal c(t).
    pub c_mean: f64,
    /// Coefficient of the fast variable in b1.
    pub fast_weight: f64,
    /// Linear damping of b2 in the fast variable (positive).
    pub fast_damping: f64,
    pub gamma0: f64,
    pub damping: f64,
    /// Slow-only residual of b1.
    slow_terms: CoefficientSet,
}

impl LinearClosedFormDrift {
    /// Derive the closed form from a coefficient set, validating its shape.
    pub fn from_coefficients(coeffs: &CoefficientSet, gamma0: f64, damping: f64) -> Result<Self> {
        let mut fast_weight = 0.0;
        let mut slow_b1 = coeffs.clone();
        slow_b1.b1.terms.clear();
        for term in &coeffs.b1.terms {
            match (term.slow_pow, term.fast_pow) {
                (_, 0) => slow_b1.b1.terms.push(term.clone()),
                (0, 1) => {
                    if !term.coeff.is_constant() {
                        return Err(Error::invalid("b1 fast coupling must be constant"));
                    }
                    fast_weight += term.coeff.offset;
                }
                _ => {
                    return Err(Error::invalid(
                        "closed form needs b1 affine in the fast variable",
                    ))
                }
            }
        }
        let mut fast_damping = 0.0;
        let mut c_mean = 0.0;
        for term in &coeffs.b2.terms {
            match (term.slow_pow, term.fast_pow) {
                (0, 1) => {
                    if !term.coeff.is_constant() {
                        return Err(Error::invalid("b2 fast damping must be constant"));
                    }
                    fast_damping -= term.coeff.offset;
                }
                (1, 0) => c_mean += term.coeff.offset,
                _ => {
                    return Err(Error::invalid(
                        "closed form needs b2 linear in both variables",
                    ))
                }
            }
        }
        if fast_damping <= 0.0 {
            return Err(Error::invalid("b2 must damp the fast variable"));
        }
        Ok(LinearClosedFormDrift {
            c_mean,
            fast_weight,
            fast_damping,
            gamma0,
            damping,
            slow_terms: slow_b1,
        })
    }

    pub fn mode_gain(&self, alpha_k: f64) -> f64 {
        self.fast_weight * self.c_mean
            / (self.gamma0 * alpha_k + self.damping + self.fast_damping)
    }
}

impl DriftOracle for LinearClosedFormDrift {
    fn eval(&self, u: &mut FieldState, model: &SpectralModel) -> Result<Vec<f64>> {
        let u_modes = u.modes(model).to_vec();
        let mut out: Vec<f64> = u_modes
            .iter()
            .zip(&model.alphas)
            .map(|(c, &a)| self.mode_gain(a) * c)
            .collect();
        if !self.slow_terms.b1.terms.is_empty() {
            let u_nodal = u.nodal(model).to_vec();
            let nodal: Vec<f64> = u_nodal
                .iter()
                .map(|&s| self.slow_terms.b1_eval(s, 0.0))
                .collect();
            let mut modes = vec![0.0; model.k_modes()];
            model.to_modes(&nodal, &mut modes);
            for (o, m) in out.iter_mut().zip(modes) {
                *o += m;
            }
        }
        Ok(out)
    }

    fn tag(&self) -> &'static str {
        "closed-form-linear"
    }
}

/// Zero averaged drift.
pub struct ZeroDrift;

impl DriftOracle for ZeroDrift {
    fn eval(&self, _u: &mut FieldState, model: &SpectralModel) -> Result<Vec<f64>> {
        Ok(vec![0.0; model.k_modes()])
    }

    fn tag(&self) -> &'static str {
        "zero"
    }
}

/// On-demand drift estimation by short bursts of fast simulation (the
/// heterogeneous-multiscale route). Deterministic: micro streams derive
/// from a call counter.
pub struct HmmDrift<'a> {
    pub sys: &'a FastSystem<'a>,
    pub params: ErgodicParams,
    pub seed: u64,
    calls: std::sync::atomic::AtomicU64,
}

impl<'a> HmmDrift<'a> {
    pub fn new(sys: &'a FastSystem<'a>, params: ErgodicParams, seed: u64) -> Self {
        HmmDrift {
            sys,
            params,
            seed,
            calls: std::sync::atomic::AtomicU64::new(0),
        }
    }
}

impl<'a> DriftOracle for HmmDrift<'a> {
    fn eval(&self, u: &mut FieldState, model: &SpectralModel) -> Result<Vec<f64>> {
        let call = self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let stream_base = call * self.params.n_paths as u64;
        let est = estimate_bbar_ergodic(self.sys, u, &self.params, self.seed, stream_base)?;
        let mut drift = est.drift;
        Ok(drift.modes(model).to_vec())
    }

    fn tag(&self) -> &'static str {
        "hmm"
    }
}

/// Opt-in cache around a drift oracle, keyed by quantized mode coefficients
/// (quantum 1e-3). Single conceptual writer with last-write-wins semantics;
/// contents are deterministic given the run manifest because the wrapped
/// oracle is.
pub struct CachedDrift<O: DriftOracle> {
    pub inner: O,
    pub quantum: f64,
    table: RwLock<HashMap<Vec<i64>, Vec<f64>>>,
}

impl<O: DriftOracle> CachedDrift<O> {
    pub fn new(inner: O) -> Self {
        CachedDrift {
            inner,
            quantum: 1e-3,
            table: RwLock::new(HashMap::new()),
        }
    }

    fn key(&self, modes: &[f64]) -> Vec<i64> {
        modes
            .iter()
            .map(|c| (c / self.quantum).round() as i64)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.table.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<O: DriftOracle> DriftOracle for CachedDrift<O> {
    fn eval(&self, u: &mut FieldState, model: &SpectralModel) -> Result<Vec<f64>> {
        let key = self.key(u.modes(model));
        if let Some(hit) = self.table.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let value = self.inner.eval(u, model)?;
        self.table.write().unwrap().insert(key, value.clone());
        Ok(value)
    }

    fn tag(&self) -> &'static str {
        "cached"
    }
}

/// Local-Lipschitz quotients and one-sided pairings of a drift map over
/// state pairs.
#[derive(Debug, Clone)]
pub struct RegularityReport {
    /// (|x1 - x2|_sup, quotient) per usable pair.
    pub quotients: Vec<(f64, f64)>,
    /// One-sided pairing <B(x1) - B(x2), delta_h> at the maximizing node of
    /// h = x1 - x2, with its envelope value 1 + |h| + |x2|.
    pub pairings: Vec<(f64, f64)>,
    /// Pairs skipped: degenerate displacement, or estimate error bands
    /// overlapping the measured difference.
    pub inconclusive_pairs: usize,
}

pub fn bbar_regularity_probe(
    model: &SpectralModel,
    states: &[FieldState],
    estimates: &[AveragedDriftEstimate],
) -> Result<RegularityReport> {
    if states.len() != estimates.len() || states.len() < 2 {
        return Err(Error::invalid("need one estimate per state, at least two"));
    }
    let mut quotients = Vec::new();
    let mut pairings = Vec::new();
    let mut inconclusive = 0usize;
    for i in 0..states.len() {
        for j in (i + 1)..states.len() {
            let mut xi = states[i].clone();
            let mut xj = states[j].clone();
            let dx: Vec<f64> = xi
                .nodal(model)
                .iter()
                .zip(xj.nodal(model))
                .map(|(a, b)| a - b)
                .collect();
            let mut dxf = FieldState::from_nodal(dx.clone(), model.k_modes());
            let denom = dxf.sup_norm(model);
            if denom == 0.0 {
                inconclusive += 1;
                continue;
            }
            let mut bi = estimates[i].drift.clone();
            let mut bj = estimates[j].drift.clone();
            let db: Vec<f64> = bi
                .nodal(model)
                .iter()
                .zip(bj.nodal(model))
                .map(|(a, b)| a - b)
                .collect();
            let mut dbf = FieldState::from_nodal(db.clone(), model.k_modes());
            let numer = dbf.sup_norm(model);
            if numer < estimates[i].error_estimate + estimates[j].error_estimate {
                inconclusive += 1;
                continue;
            }
            quotients.push((denom, numer / denom));
            let (node, _) = dx
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap();
            let pairing = db[node] * dx[node] / denom;
            let envelope = 1.0 + denom + xj.sup_norm(model);
            pairings.push((pairing, envelope));
        }
    }
    Ok(RegularityReport {
        quotients,
        pairings,
        inconclusive_pairs: inconclusive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::presets;
    use crate::spectral::{power_law_lambdas, BoundaryKind, TimeDependentOperator};

    fn model(k: usize) -> SpectralModel {
        SpectralModel::new(
            BoundaryKind::Dirichlet,
            k,
            2 * k + 1,
            std::f64::consts::PI,
            power_law_lambdas(k, 1.0, -1.0),
            3.0,
            0.6,
        )
        .unwrap()
    }

    #[test]
    fn slow_only_reaction_is_averaged_exactly() {
        // b1 with no fast dependence: the time average equals the direct
        // composition at any horizon.
        let m = model(3);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let mut coeffs = presets::cubic(1.0, 0.5, 1.0, 0.0, 0.3);
        coeffs.b1.terms.retain(|t| t.fast_pow == 0);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let x = FieldState::mode(&m, 0, 0.8);
        let params = ErgodicParams {
            horizon: 0.5,
            s0: 0.0,
            t_burn: 0.5,
            dt: 1e-3,
            n_paths: 4,
        };
        let mut est = estimate_bbar_ergodic(&sys, &x, &params, 1, 0).unwrap();
        let mut xc = x.clone();
        let x_nodal = xc.nodal(&m).to_vec();
        let direct: Vec<f64> = x_nodal.iter().map(|&s| coeffs.b1_eval(s, 7.7)).collect();
        let mut direct_f = FieldState::from_nodal(direct, m.k_modes());
        for (a, b) in est.drift.modes(&m).iter().zip(direct_f.modes(&m)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(est.error_estimate < 1e-12);
    }

    #[test]
    fn ergodic_estimate_matches_closed_form_mode_gain() {
        // Mode-1 coefficient of the averaged drift equals
        // c0 / (gamma0 alpha_1 + damping + 1) = 1/3 for the unit constants.
        let m = model(3);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.5);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let x = FieldState::mode(&m, 0, 2.0);
        let params = ErgodicParams {
            horizon: 100.0,
            s0: 0.0,
            t_burn: 3.0,
            dt: 2e-3,
            n_paths: 64,
        };
        let mut est = estimate_bbar_ergodic(&sys, &x, &params, 11, 0).unwrap();
        let gain = est.drift.modes(&m)[0] / 2.0;
        assert!((gain - 1.0 / 3.0).abs() / (1.0 / 3.0) < 0.02, "gain {gain}");
    }

    #[test]
    fn deviation_shrinks_when_horizon_quadruples() {
        let m = model(2);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.5);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let x = FieldState::mode(&m, 0, 1.0);
        let closed = LinearClosedFormDrift::from_coefficients(&coeffs, 1.0, 1.0).unwrap();
        let mut xc = x.clone();
        let reference = FieldState::from_modes(closed.eval(&mut xc, &m).unwrap(), m.n_nodes());
        let deviation_at = |t: f64, stream: u64| {
            let params = ErgodicParams {
                horizon: t,
                s0: 0.0,
                t_burn: 3.0,
                dt: 2e-3,
                n_paths: 48,
            };
            ergodic_average_with_deviation(&sys, &x, &params, 5, stream, Some(&reference))
                .unwrap()
                .1
        };
        let d1 = deviation_at(8.0, 0);
        let d4 = deviation_at(32.0, 1000);
        let ratio = d1 / d4;
        // The c/T mean-square term shrinks by about 4; allow a loose band
        // around the corresponding factor-2 drop of the rms error.
        assert!(ratio > 2.0 && ratio < 9.0, "deviation ratio {ratio}");
    }

    #[test]
    fn measure_estimate_agrees_with_ergodic() {
        let m = model(2);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.4);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let x = FieldState::mode(&m, 0, 1.0);
        let ergodic = ErgodicParams {
            horizon: 60.0,
            s0: 0.0,
            t_burn: 3.0,
            dt: 2e-3,
            n_paths: 32,
        };
        let mut a = estimate_bbar_ergodic(&sys, &x, &ergodic, 3, 0).unwrap();
        let period = 2.0 * std::f64::consts::PI;
        let grid: Vec<f64> = (0..=16).map(|i| i as f64 * period / 16.0).collect();
        let mp = MeasureAverageParams {
            time_grid: grid,
            measure: MeasureParams {
                t_burn: 5.0,
                dt: 2e-3,
                n_members: 512,
            },
        };
        let mut b = estimate_bbar_measure(&sys, &x, &mp, 3, 10_000).unwrap();
        let gap = a
            .drift
            .modes(&m)
            .iter()
            .zip(b.drift.modes(&m))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        let budget = a.error_estimate + b.error_estimate + 0.01;
        assert!(gap <= budget, "gap {gap} budget {budget}");
    }

    #[test]
    fn measure_average_over_one_period_equals_many() {
        let m = model(2);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.3);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let x = FieldState::mode(&m, 0, 1.0);
        let period = 2.0 * std::f64::consts::PI;
        let measure = MeasureParams {
            t_burn: 5.0,
            dt: 2e-3,
            n_members: 512,
        };
        let grid_one: Vec<f64> = (0..=16).map(|i| i as f64 * period / 16.0).collect();
        let grid_many: Vec<f64> = (0..=160).map(|i| i as f64 * period / 16.0).collect();
        let mut one = estimate_bbar_measure(
            &sys,
            &x,
            &MeasureAverageParams {
                time_grid: grid_one,
                measure,
            },
            5,
            0,
        )
        .unwrap();
        let mut many = estimate_bbar_measure(
            &sys,
            &x,
            &MeasureAverageParams {
                time_grid: grid_many,
                measure,
            },
            5,
            1_000_000,
        )
        .unwrap();
        let gap = one
            .drift
            .modes(&m)
            .iter()
            .zip(many.drift.modes(&m))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(gap < 0.01, "gap {gap}");
    }

    #[test]
    fn autonomous_measure_average_single_time_point() {
        let m = model(2);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.0, 1.0, 0.0, 0.3);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let x = FieldState::mode(&m, 0, 1.0);
        let measure = MeasureParams {
            t_burn: 6.0,
            dt: 2e-3,
            n_members: 2048,
        };
        let mut single = estimate_bbar_measure(
            &sys,
            &x,
            &MeasureAverageParams {
                time_grid: vec![0.0],
                measure,
            },
            7,
            0,
        )
        .unwrap();
        let gain = single.drift.modes(&m)[0];
        assert!((gain - 1.0 / 3.0).abs() < 0.02, "gain {gain}");
    }

    #[test]
    fn closed_form_rejects_nonlinear_family() {
        let coeffs = presets::cubic(1.0, 0.5, 1.0, 0.1, 0.3);
        assert!(LinearClosedFormDrift::from_coefficients(&coeffs, 1.0, 1.0).is_err());
    }

    #[test]
    fn envelope_constant_is_uniform_over_states() {
        let m = model(3);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.4);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let params = ErgodicParams {
            horizon: 20.0,
            s0: 0.0,
            t_burn: 3.0,
            dt: 2e-3,
            n_paths: 16,
        };
        let mut worst = 0.0f64;
        for (i, amp) in [0.5, 1.0, 2.0, 4.0].iter().enumerate() {
            let x = FieldState::mode(&m, 0, *amp);
            let mut est =
                estimate_bbar_ergodic(&sys, &x, &params, 9, (i * 1000) as u64).unwrap();
            worst = worst.max(est.envelope_constant(&x, coeffs.m1, &m));
        }
        assert!(worst < 1.0, "fitted envelope constant {worst}");
    }

    #[test]
    fn regularity_probe_linear_quotient() {
        let m = model(2);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.4);
        let closed = LinearClosedFormDrift::from_coefficients(&coeffs, 1.0, 1.0).unwrap();
        let states: Vec<FieldState> = [0.5f64, 1.0, 2.0]
            .iter()
            .map(|a| FieldState::mode(&m, 0, *a))
            .collect();
        let estimates: Vec<AveragedDriftEstimate> = states
            .iter()
            .map(|x| {
                let mut xc = x.clone();
                let modes = closed.eval(&mut xc, &m).unwrap();
                AveragedDriftEstimate {
                    drift: FieldState::from_modes(modes, m.n_nodes()),
                    method: DriftMethod::ClosedForm,
                    horizon: 0.0,
                    error_estimate: 0.0,
                }
            })
            .collect();
        let report = bbar_regularity_probe(&m, &states, &estimates).unwrap();
        let gain = closed.mode_gain(m.alphas[0]).abs();
        for (_, q) in &report.quotients {
            assert!((q - gain).abs() / gain < 0.05, "quotient {q} vs {gain}");
        }
        assert_eq!(report.inconclusive_pairs, 0);
        // One-sided pairings stay inside the affine envelope.
        for (pairing, envelope) in &report.pairings {
            assert!(pairing <= envelope, "pairing {pairing} envelope {envelope}");
        }
    }

    #[test]
    fn regularity_probe_flags_degenerate_pairs() {
        let m = model(2);
        let x = FieldState::mode(&m, 0, 1.0);
        let est = AveragedDriftEstimate {
            drift: FieldState::zero(&m),
            method: DriftMethod::ClosedForm,
            horizon: 0.0,
            error_estimate: 0.0,
        };
        let report =
            bbar_regularity_probe(&m, &[x.clone(), x], &[est.clone(), est]).unwrap();
        assert_eq!(report.quotients.len(), 0);
        assert_eq!(report.inconclusive_pairs, 1);
    }

    #[test]
    fn cubic_quotients_grow_with_radius() {
        // Local, not global, Lipschitz behaviour: quotients over balls of
        // radius 1, 2, 4 grow with the radius for a cubic slow reaction.
        let m = model(2);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::cubic(1.0, 0.0, 1.0, 0.0, 0.3);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let params = ErgodicParams {
            horizon: 30.0,
            s0: 0.0,
            t_burn: 3.0,
            dt: 1e-3,
            n_paths: 24,
        };
        let mut worst_by_radius = Vec::new();
        for (ri, radius) in [1.0f64, 2.0, 4.0].iter().enumerate() {
            let states: Vec<FieldState> = [0.8, 1.0]
                .iter()
                .map(|f| FieldState::mode(&m, 0, f * radius))
                .collect();
            let estimates: Result<Vec<AveragedDriftEstimate>> = states
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    estimate_bbar_ergodic(&sys, x, &params, 13, ((ri * 10 + i) * 1000) as u64)
                })
                .collect();
            let report = bbar_regularity_probe(&m, &states, &estimates.unwrap()).unwrap();
            let max_q = report
                .quotients
                .iter()
                .map(|(_, q)| *q)
                .fold(0.0f64, f64::max);
            worst_by_radius.push(max_q);
        }
        assert!(
            worst_by_radius[0] < worst_by_radius[1] && worst_by_radius[1] < worst_by_radius[2],
            "quotients {worst_by_radius:?}"
        );
    }

    #[test]
    fn hmm_oracle_matches_closed_form_on_linear_config() {
        let m = model(2);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.3);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let params = ErgodicParams {
            horizon: 40.0,
            s0: 0.0,
            t_burn: 3.0,
            dt: 2e-3,
            n_paths: 32,
        };
        let hmm = HmmDrift::new(&sys, params, 77);
        let closed = LinearClosedFormDrift::from_coefficients(&coeffs, 1.0, 1.0).unwrap();
        let mut x = FieldState::mode(&m, 0, 1.0);
        let a = hmm.eval(&mut x, &m).unwrap();
        let b = closed.eval(&mut x, &m).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 0.02, "{u} vs {v}");
        }
    }

    #[test]
    fn cached_oracle_hits_quantized_states() {
        let m = model(2);
        let coeffs = presets::linear_validation(1.0, 0.0, 1.0, 0.0, 0.3);
        let closed = LinearClosedFormDrift::from_coefficients(&coeffs, 1.0, 1.0).unwrap();
        let cached = CachedDrift::new(closed);
        let mut x = FieldState::mode(&m, 0, 1.0);
        let a = cached.eval(&mut x, &m).unwrap();
        // Within one quantum: served from the cache, bitwise equal.
        let mut x2 = FieldState::mode(&m, 0, 1.0 + 2e-4);
        let b = cached.eval(&mut x2, &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.len(), 1);
        let mut x3 = FieldState::mode(&m, 0, 1.1);
        let _ = cached.eval(&mut x3, &m).unwrap();
        assert_eq!(cached.len(), 2);
    }

    #[test]
    fn s0_independence_spot_check() {
        let m = model(2);
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.5, 1.0, 0.0, 0.4);
        let sys = FastSystem::new(&m, &op, &coeffs, 1.0);
        let x = FieldState::mode(&m, 0, 1.0);
        let at = |s0: f64, stream: u64| {
            let params = ErgodicParams {
                horizon: 60.0,
                s0,
                t_burn: 3.0,
                dt: 2e-3,
                n_paths: 32,
            };
            estimate_bbar_ergodic(&sys, &x, &params, 23, stream).unwrap()
        };
        let mut a = at(0.0, 0);
        let mut b = at(17.3, 100);
        let gap = a
            .drift
            .modes(&m)
            .iter()
            .zip(b.drift.modes(&m))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(
            gap <= a.error_estimate + b.error_estimate + 0.01,
            "gap {gap}"
        );
    }
}
