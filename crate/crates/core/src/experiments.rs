//! Experiment orchestration: freeze-window schedules, the auxiliary fast
//! process and its deviation, averaging-remainder series, and the headline
//! convergence experiment comparing the coupled slow component against the
//! averaged equation on shared slow noise.

use crate::averaging::{HmmDrift, LinearClosedFormDrift, ZeroDrift};
use crate::config::{BuiltSystem, DriftOracleKind};
use crate::error::{Error, Result};
use crate::integrators::{
    integrate_averaged, integrate_coupled, CoupledStepping, DriftOracle, FastScratch, FastSystem,
    SlowScratch, SlowSystem,
};
use crate::noise::{Branch, NoiseSpec};
use crate::records::{EpsSummary, RunRecord, SeriesRow, SweepCell};
use crate::spectral::FieldState;
use crate::stats;
use rayon::prelude::*;

/// Freeze-window width `delta = eps * kappa * log(1/eps)`.
pub fn khasminskii_schedule(epsilon: f64, kappa: f64, horizon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!(
            "freeze schedule needs epsilon in (0, 1), got {epsilon}"
        )));
    }
    if kappa <= 0.0 {
        return Err(Error::invalid("kappa must be positive"));
    }
    let delta = epsilon * kappa * (1.0 / epsilon).ln();
    if delta >= horizon {
        return Err(Error::invalid(format!(
            "freeze window {delta} does not fit the horizon {horizon}"
        )));
    }
    Ok(delta)
}

/// Build the coupled system view of a [`BuiltSystem`].
fn fast_system(built: &BuiltSystem) -> FastSystem<'_> {
    FastSystem::new(
        &built.fast_model,
        &built.operator,
        &built.coefficients,
        built.config.dynamics.alpha,
    )
}

/// Construct the configured drift oracle. The estimator variant borrows the
/// fast system, so the caller supplies it. The opt-in cache wraps the
/// on-demand estimator only (the closed forms are already cheap).
pub fn drift_oracle<'a>(
    built: &'a BuiltSystem,
    fast: &'a FastSystem<'a>,
) -> Result<Box<dyn DriftOracle + 'a>> {
    match built.config.averaging.drift {
        DriftOracleKind::Zero => Ok(Box::new(ZeroDrift)),
        DriftOracleKind::ClosedFormLinear => {
            let (gamma_min, gamma_max) = built.operator.gamma_bounds();
            if (gamma_max - gamma_min).abs() > 1e-12 {
                return Err(Error::config(
                    "closed-form drift needs a constant modulation",
                ));
            }
            let oracle = LinearClosedFormDrift::from_coefficients(
                &built.coefficients,
                gamma_min,
                built.config.dynamics.alpha,
            )
            .map_err(|e| Error::config(format!("closed-form drift unavailable: {e}")))?;
            Ok(Box::new(oracle))
        }
        DriftOracleKind::Hmm => {
            let params = crate::averaging::ErgodicParams {
                horizon: built.config.averaging.hmm_horizon,
                s0: 0.0,
                t_burn: built.default_t_burn(),
                dt: built.config.measures.dt,
                n_paths: built.config.averaging.hmm_paths,
            };
            let hmm = HmmDrift::new(fast, params, built.config.seed);
            if built.config.averaging.cache {
                Ok(Box::new(crate::averaging::CachedDrift::new(hmm)))
            } else {
                Ok(Box::new(hmm))
            }
        }
    }
}

/// Burn-in calibrated from a pilot mixing fit (5 / fitted rate), falling
/// back to 5 / alpha when the pilot is inconclusive.
pub fn calibrated_t_burn(built: &BuiltSystem) -> Result<f64> {
    let fast = fast_system(built);
    let dict = crate::measures::TestFunctionDictionary::standard(&built.fast_model);
    let params = crate::measures::MeasureParams {
        t_burn: built.default_t_burn(),
        dt: built.config.measures.dt,
        n_members: 64,
    };
    let y = crate::spectral::FieldState::mode(&built.fast_model, 0, 1.0);
    let scale = 1.0 / built.default_t_burn();
    let lags: Vec<f64> = (1..=4).map(|i| i as f64 * 0.4 / scale / 5.0).collect();
    let out = crate::measures::mixing_decay_estimate(
        &fast,
        &built.x0,
        &y,
        0.0,
        &lags,
        &dict,
        &params,
        built.config.seed,
        u64::MAX / 4,
    )?;
    Ok(match out {
        crate::measures::MixingOutcome::Estimate(e) => 5.0 / e.rate,
        crate::measures::MixingOutcome::Inconclusive { .. } => {
            5.0 / built.config.dynamics.alpha
        }
    })
}

/// Default slow-truncation radius: mirrors the a-priori moment bounds, so
/// the clamp stays inactive on typical paths.
pub fn default_clamp(built: &BuiltSystem) -> f64 {
    let mut x = built.x0.clone();
    let mut y = built.y0.clone();
    4.0 * (1.0 + x.sup_norm(&built.slow_model) + y.sup_norm(&built.fast_model))
}

/// Deviation between the fast component and its window-frozen auxiliary
/// twin, co-simulated on shared noise.
#[derive(Debug, Clone)]
pub struct DeviationSeries {
    pub epsilon: f64,
    pub delta: f64,
    /// Grid times (macro grid).
    pub times: Vec<f64>,
    /// Mean over trials of the squared sup-norm deviation at each time.
    pub mean_sq: Vec<f64>,
    /// sup over the grid of `mean_sq`.
    pub sup_mean_sq: f64,
    /// 3 SE of the sup cell, for band-aware comparisons.
    pub sup_band: f64,
}

/// Co-simulate the coupled system and the auxiliary fast motion whose slow
/// argument is frozen at the last window boundary, over `trials`
/// independent noise realizations; slow-truncation radius `clamp` applies
/// to both.
pub fn auxiliary_deviation(
    built: &BuiltSystem,
    epsilon: f64,
    delta: f64,
    trials: usize,
    clamp: Option<f64>,
    stream_base: u64,
) -> Result<DeviationSeries> {
    let coeffs = match clamp {
        Some(n) => built.coefficients.truncated(n)?,
        None => built.coefficients.clone(),
    };
    let stepping = built.stepping(epsilon);
    stepping.validate()?;
    let n_macro = stepping.n_macro();
    let per_trial: Result<Vec<Vec<f64>>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            deviation_single_trial(
                built,
                &coeffs,
                &stepping,
                delta,
                NoiseSpec::new(built.config.seed, stream_base + 2 * trial as u64),
                NoiseSpec::new(built.config.seed, stream_base + 2 * trial as u64 + 1),
            )
        })
        .collect();
    let per_trial = per_trial?;
    let mut times = Vec::with_capacity(n_macro + 1);
    for i in 0..=n_macro {
        times.push(i as f64 * stepping.dt_macro);
    }
    let mut mean_sq = vec![0.0; n_macro + 1];
    for row in &per_trial {
        for (m, v) in mean_sq.iter_mut().zip(row) {
            *m += v / trials as f64;
        }
    }
    let (sup_idx, sup_mean_sq) = mean_sq
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, v)| (i, *v))
        .unwrap();
    let sup_cell: Vec<f64> = per_trial.iter().map(|row| row[sup_idx]).collect();
    let sup_band = if trials > 1 {
        3.0 * stats::standard_error(&sup_cell)
    } else {
        0.0
    };
    Ok(DeviationSeries {
        epsilon,
        delta,
        times,
        mean_sq,
        sup_mean_sq,
        sup_band,
    })
}

fn deviation_single_trial(
    built: &BuiltSystem,
    coeffs: &crate::coefficients::CoefficientSet,
    stepping: &CoupledStepping,
    delta: f64,
    spec_q1: NoiseSpec,
    spec_q2: NoiseSpec,
) -> Result<Vec<f64>> {
    let slow_model = &built.slow_model;
    let fast = FastSystem::new(
        &built.fast_model,
        &built.operator,
        coeffs,
        built.config.dynamics.alpha,
    );
    let slow = SlowSystem { model: slow_model };
    let n_macro = stepping.n_macro();
    let n_micro = stepping.micro_per_macro();
    let h_macro = stepping.dt_macro;
    let h_tau = h_macro / n_micro as f64 / stepping.epsilon;

    let mut u = built.x0.clone();
    let mut u_modes = u.modes(slow_model).to_vec();
    let mut v = built.y0.clone();
    let mut v_modes = v.modes(&built.fast_model).to_vec();
    let mut v_hat_modes = v_modes.clone();

    let mut fast_scratch = FastScratch::new(&built.fast_model);
    let mut hat_scratch = FastScratch::new(&built.fast_model);
    let mut slow_scratch = SlowScratch::new(slow_model);
    let n_nodes = slow_model.n_nodes();
    let mut u_nodal = vec![0.0; n_nodes];
    let mut v_nodal = vec![0.0; n_nodes];
    let mut frozen_nodal = vec![0.0; n_nodes];
    let mut drift_nodal = vec![0.0; n_nodes];
    let mut drift_modes = vec![0.0; slow_model.k_modes()];
    let mut diff_nodal = vec![0.0; n_nodes];

    let mut deviations = Vec::with_capacity(n_macro + 1);
    let mut window: i64 = -1;
    let mut micro_counter: u64 = 0;
    let g1_const = coeffs.g1.is_state_independent();

    for i in 0..=n_macro {
        let t = i as f64 * h_macro;
        slow_model.to_nodal(&u_modes, &mut u_nodal);
        built.fast_model.to_nodal(&v_modes, &mut v_nodal);

        // Window boundary: re-freeze the slow argument and re-anchor the
        // auxiliary state to the true one.
        let k = (t / delta + 1e-12).floor() as i64;
        if k != window {
            window = k;
            frozen_nodal.copy_from_slice(&u_nodal);
            v_hat_modes.copy_from_slice(&v_modes);
        }

        built.fast_model.to_nodal(&v_hat_modes, &mut diff_nodal);
        let mut dev = 0.0f64;
        for j in 0..n_nodes {
            dev = dev.max((diff_nodal[j] - v_nodal[j]).abs());
        }
        deviations.push(dev * dev);
        if i == n_macro {
            break;
        }

        for j in 0..n_nodes {
            drift_nodal[j] = coeffs.b1_eval(u_nodal[j], v_nodal[j]);
        }
        slow_model.to_modes(&drift_nodal, &mut drift_modes);

        for j in 0..n_micro {
            let tau = (t + j as f64 * h_macro / n_micro as f64) / stepping.epsilon;
            fast.step(
                &mut v_modes,
                &u_nodal,
                tau,
                h_tau,
                &spec_q2,
                micro_counter,
                &mut fast_scratch,
            )?;
            // Same key: the auxiliary twin sees the same increments.
            fast.step(
                &mut v_hat_modes,
                &frozen_nodal,
                tau,
                h_tau,
                &spec_q2,
                micro_counter,
                &mut hat_scratch,
            )?;
            micro_counter += 1;
        }

        slow.step(
            &mut u_modes,
            &drift_modes,
            |s| coeffs.g1_eval(s),
            g1_const,
            h_macro,
            &spec_q1,
            i as u64,
            &mut slow_scratch,
        )?;
    }
    Ok(deviations)
}

/// Remainder statistics along coupled trajectories: the running integral of
/// the pairing of (slow reaction minus averaged drift) against a probe.
#[derive(Debug, Clone)]
pub struct RemainderSeries {
    pub epsilon: f64,
    /// Per-trial sup over time of |R(t)|.
    pub sup_per_trial: Vec<f64>,
    pub mean_sup: f64,
    pub band: f64,
}

pub fn remainder_series(
    built: &BuiltSystem,
    epsilon: f64,
    probe: &FieldState,
    oracle: &dyn DriftOracle,
    trials: usize,
    stream_base: u64,
) -> Result<RemainderSeries> {
    let slow_model = &built.slow_model;
    let mut probe_c = probe.clone();
    let probe_modes = probe_c.modes(slow_model).to_vec();
    let stepping = built.stepping(epsilon);
    let sup_per_trial: Result<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let fast = fast_system(built);
            let slow = SlowSystem { model: slow_model };
            let mut sup_r = 0.0f64;
            let mut r_acc = 0.0f64;
            let h = stepping.dt_macro;
            let mut err: Option<Error> = None;
            {
                let mut observer = |_t: f64, u_modes: &[f64], v_modes: &[f64]| {
                    if err.is_some() {
                        return;
                    }
                    // <B1(u, v) - Bbar(u), probe> accumulated left-point.
                    let mut u = FieldState::from_modes(u_modes.to_vec(), slow_model.n_nodes());
                    let mut v =
                        FieldState::from_modes(v_modes.to_vec(), built.fast_model.n_nodes());
                    let u_nodal = u.nodal(slow_model).to_vec();
                    let v_nodal = v.nodal(&built.fast_model).to_vec();
                    let mut b1_nodal = vec![0.0; slow_model.n_nodes()];
                    for j in 0..slow_model.n_nodes() {
                        b1_nodal[j] = built.coefficients.b1_eval(u_nodal[j], v_nodal[j]);
                    }
                    let mut b1_modes = vec![0.0; slow_model.k_modes()];
                    slow_model.to_modes(&b1_nodal, &mut b1_modes);
                    let bbar_modes = match oracle.eval(&mut u, slow_model) {
                        Ok(m) => m,
                        Err(e) => {
                            err = Some(e);
                            return;
                        }
                    };
                    let mut pairing = 0.0;
                    for kk in 0..slow_model.k_modes() {
                        pairing += (b1_modes[kk] - bbar_modes[kk]) * probe_modes[kk];
                    }
                    // The running integral up to the current grid time is
                    // complete before this step's contribution is added, so
                    // the final observation does not spill past the horizon.
                    sup_r = sup_r.max(r_acc.abs());
                    r_acc += pairing * h;
                };
                integrate_coupled(
                    &slow,
                    &fast,
                    &built.coefficients,
                    &stepping,
                    &built.x0,
                    &built.y0,
                    &NoiseSpec::new(built.config.seed, stream_base + 2 * trial as u64),
                    &NoiseSpec::new(built.config.seed, stream_base + 2 * trial as u64 + 1),
                    usize::MAX,
                    Some(&mut observer),
                )?;
            }
            if let Some(e) = err {
                return Err(e);
            }
            Ok(sup_r)
        })
        .collect();
    let sup_per_trial = sup_per_trial?;
    let mean_sup = stats::mean(&sup_per_trial);
    let band = if trials > 1 {
        3.0 * stats::standard_error(&sup_per_trial)
    } else {
        0.0
    };
    Ok(RemainderSeries {
        epsilon,
        sup_per_trial,
        mean_sup,
        band,
    })
}

/// How the averaged twin's slow noise relates to the coupled run's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    /// Shared slow-noise stream: the gap isolates the averaging error.
    CommonNoise,
    /// Independent streams: law-level comparisons only.
    IndependentNoise,
}

/// One convergence trial: coupled run and averaged twin, sup-norm gap over
/// the macro grid.
pub fn convergence_trial(
    built: &BuiltSystem,
    oracle: &dyn DriftOracle,
    epsilon: f64,
    streams: (u64, u64, u64),
    mode: CouplingMode,
) -> Result<f64> {
    let (q1, q2, q1_avg) = streams;
    let slow = SlowSystem {
        model: &built.slow_model,
    };
    let fast = fast_system(built);
    let stepping = built.stepping(epsilon);
    let coupled = integrate_coupled(
        &slow,
        &fast,
        &built.coefficients,
        &stepping,
        &built.x0,
        &built.y0,
        &NoiseSpec::new(built.config.seed, q1),
        &NoiseSpec::new(built.config.seed, q2),
        1,
        None,
    )?;
    let avg_stream = match mode {
        CouplingMode::CommonNoise => q1,
        CouplingMode::IndependentNoise => q1_avg,
    };
    let averaged = integrate_averaged(
        &slow,
        &built.coefficients,
        oracle,
        stepping.dt_macro,
        stepping.horizon,
        &built.x0,
        &NoiseSpec::new(built.config.seed, avg_stream),
        1,
    )?;
    let mut gap = 0.0f64;
    let mut diff_nodal = vec![0.0; built.slow_model.n_nodes()];
    for (u_eps, u_bar) in coupled.slow_modes.iter().zip(&averaged.slow_modes) {
        let d: Vec<f64> = u_eps.iter().zip(u_bar).map(|(a, b)| a - b).collect();
        built.slow_model.to_nodal(&d, &mut diff_nodal);
        let sup = diff_nodal.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        gap = gap.max(sup);
    }
    Ok(gap)
}

/// Stream layout of the sweep: trials own disjoint stream triples, so any
/// worker count reproduces the same numbers.
fn sweep_streams(eps_idx: usize, trial: usize, trials: usize) -> (u64, u64, u64) {
    let cell = (eps_idx * trials + trial) as u64;
    (3 * cell, 3 * cell + 1, 3 * cell + 2)
}

/// Pilot scale for the exceedance threshold: 0.2 x the sup over time of the
/// averaged solution's sup-norm, from a noise-stream outside the sweep
/// range.
pub fn pilot_eta(built: &BuiltSystem, oracle: &dyn DriftOracle) -> Result<f64> {
    let slow = SlowSystem {
        model: &built.slow_model,
    };
    let stepping = built.stepping(built.config.sweep.eps[0]);
    let pilot_stream = u64::MAX / 2;
    let averaged = integrate_averaged(
        &slow,
        &built.coefficients,
        oracle,
        stepping.dt_macro,
        stepping.horizon,
        &built.x0,
        &NoiseSpec::new(built.config.seed, pilot_stream),
        1,
    )?;
    let scale = averaged.slow_sup.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(0.2 * scale)
}

/// The headline experiment: per scale ratio, empirical exceedance
/// proportions of the sup-norm gap with Wilson intervals and gap quantiles.
/// A blown-up trial is recorded as an exceedance and flagged.
pub fn convergence_experiment(built: &BuiltSystem, mode: CouplingMode) -> Result<RunRecord> {
    let start = std::time::Instant::now();
    let fast = fast_system(built);
    let oracle = drift_oracle(built, &fast)?;
    let eta = match built.config.sweep.eta {
        Some(e) => e,
        None => pilot_eta(built, oracle.as_ref())?,
    };
    let trials = built.config.sweep.trials;
    let mut record = RunRecord::new(&built.config)?;
    record.manifest.eta = Some(eta);
    for (eps_idx, &epsilon) in built.config.sweep.eps.iter().enumerate() {
        let cells: Result<Vec<SweepCell>> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let streams = sweep_streams(eps_idx, trial, trials);
                let fast = fast_system(built);
                let oracle = drift_oracle(built, &fast)?;
                match convergence_trial(built, oracle.as_ref(), epsilon, streams, mode) {
                    Ok(gap) => Ok(SweepCell {
                        epsilon,
                        trial,
                        stream_q1: streams.0,
                        stream_q2: streams.1,
                        sup_gap: gap,
                        blown_up: false,
                    }),
                    Err(Error::BlowUp { .. }) => Ok(SweepCell {
                        epsilon,
                        trial,
                        stream_q1: streams.0,
                        stream_q2: streams.1,
                        sup_gap: f64::INFINITY,
                        blown_up: true,
                    }),
                    Err(other) => Err(other),
                }
            })
            .collect();
        let mut cells = cells?;
        // Deterministic ordering regardless of scheduling.
        cells.sort_by_key(|c| c.trial);
        let gaps: Vec<f64> = cells
            .iter()
            .map(|c| if c.blown_up { f64::INFINITY } else { c.sup_gap })
            .collect();
        let exceedances = gaps.iter().filter(|g| **g > eta).count();
        let finite: Vec<f64> = gaps.iter().copied().filter(|g| g.is_finite()).collect();
        let (q10, q50, q90) = if finite.is_empty() {
            (f64::INFINITY, f64::INFINITY, f64::INFINITY)
        } else {
            (
                stats::quantile(&finite, 0.1),
                stats::quantile(&finite, 0.5),
                stats::quantile(&finite, 0.9),
            )
        };
        record.summaries.push(EpsSummary {
            epsilon,
            trials,
            exceedances,
            wilson: stats::wilson_interval(exceedances, trials),
            gap_q10: q10,
            gap_median: q50,
            gap_q90: q90,
        });
        record.cells.extend(cells);
    }
    record.manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Re-run one stored sweep cell from its manifest streams.
pub fn replay_cell(built: &BuiltSystem, cell: &SweepCell, mode: CouplingMode) -> Result<f64> {
    let fast = fast_system(built);
    let oracle = drift_oracle(built, &fast)?;
    convergence_trial(
        built,
        oracle.as_ref(),
        cell.epsilon,
        (cell.stream_q1, cell.stream_q2, cell.stream_q2 + 1),
        mode,
    )
}

/// Collect the deviation and remainder sweeps into series rows of a record.
pub fn deviation_sweep(
    built: &BuiltSystem,
    trials: usize,
    clamp: Option<f64>,
) -> Result<(Vec<DeviationSeries>, Vec<SeriesRow>)> {
    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut stream_base = 1_000_000_000u64;
    for &eps in &built.config.sweep.eps {
        let delta = khasminskii_schedule(eps, built.config.sweep.kappa, built.config.dynamics.horizon)?;
        let series = auxiliary_deviation(built, eps, delta, trials, clamp, stream_base)?;
        stream_base += 2 * trials as u64;
        rows.push(SeriesRow {
            kind: "deviation_sup_mean_sq".into(),
            epsilon: eps,
            index: 0,
            value: series.sup_mean_sq,
        });
        out.push(series);
    }
    Ok((out, rows))
}

/// Remainder sweep over the configured scale ratios, as series rows.
pub fn remainder_sweep(
    built: &BuiltSystem,
    trials: usize,
    probe: &FieldState,
) -> Result<(Vec<RemainderSeries>, Vec<SeriesRow>)> {
    let fast = fast_system(built);
    let oracle = drift_oracle(built, &fast)?;
    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut stream_base = 2_000_000_000u64;
    for &eps in &built.config.sweep.eps {
        let series = remainder_series(built, eps, probe, oracle.as_ref(), trials, stream_base)?;
        stream_base += 2 * trials as u64;
        rows.push(SeriesRow {
            kind: "remainder_mean_sup".into(),
            epsilon: eps,
            index: 0,
            value: series.mean_sup,
        });
        out.push(series);
    }
    Ok((out, rows))
}

/// Residual of the discrete weak-form identity along a stored coupled
/// trajectory, recomputed from the record and the replayed slow-noise
/// increments. The residual is a time-discretization artifact of size
/// O(dt_macro).
pub fn weak_form_residual(
    built: &BuiltSystem,
    record: &crate::integrators::TrajectoryRecord,
    oracle: &dyn DriftOracle,
    probe_mode: usize,
    q1_stream: u64,
) -> Result<f64> {
    let model = &built.slow_model;
    let k = probe_mode;
    if record.slow_modes.len() < 2 {
        return Err(Error::invalid("trajectory too short"));
    }
    if record.fast_modes.len() != record.slow_modes.len() {
        return Err(Error::invalid(
            "weak-form check needs a coupled record at full macro resolution",
        ));
    }
    let h = record.times[1] - record.times[0];
    let alpha_k = model.alphas[k];
    let spec = NoiseSpec::new(built.config.seed, q1_stream);
    let mut xi = vec![0.0; model.k_modes()];
    let mut lhs_drift = 0.0;
    let mut noise_sum = 0.0;
    let g1_const = built.coefficients.g1.is_state_independent();
    if !g1_const {
        return Err(Error::invalid(
            "weak-form check implemented for state-independent g1",
        ));
    }
    let g1 = built.coefficients.g1_eval(0.0);
    for i in 0..record.slow_modes.len() - 1 {
        let u_modes = &record.slow_modes[i];
        let v_modes = &record.fast_modes[i];
        let mut u = FieldState::from_modes(u_modes.clone(), model.n_nodes());
        let mut v = FieldState::from_modes(v_modes.clone(), built.fast_model.n_nodes());
        let u_nodal = u.nodal(model).to_vec();
        let v_nodal = v.nodal(&built.fast_model).to_vec();
        let mut b1_nodal = vec![0.0; model.n_nodes()];
        for j in 0..model.n_nodes() {
            b1_nodal[j] = built.coefficients.b1_eval(u_nodal[j], v_nodal[j]);
        }
        let mut b1_modes = vec![0.0; model.k_modes()];
        model.to_modes(&b1_nodal, &mut b1_modes);
        let bbar = oracle.eval(&mut u, model)?;
        // The averaged drift plus the remainder integrand reassemble the
        // raw reaction pairing.
        let remainder_term = b1_modes[k] - bbar[k];
        lhs_drift += (-alpha_k * u_modes[k] + bbar[k] + remainder_term) * h;
        spec.standard_normals(Branch::Forward, i as u64, &mut xi);
        noise_sum += g1 * model.noise_lambdas[k] * h.sqrt() * xi[k];
    }
    let first = record.slow_modes.first().unwrap()[k];
    let last = record.slow_modes.last().unwrap()[k];
    Ok((last - first - lhs_drift - noise_sum).abs())
}
