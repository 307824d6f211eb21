//! Command-line driver: one coupled run, evolution-measure diagnostics,
//! averaged-drift estimation, averaged-equation runs, the convergence
//! sweep, and the invariant check suite.
//!
//! Exit codes: 0 success, 2 config validation failure, 3 numerical
//! blow-up, 4 IO or data corruption.

use clap::{Parser, Subcommand};
use slowfast_core::averaging::{estimate_bbar_ergodic, estimate_bbar_measure};
use slowfast_core::config::{BuiltSystem, ExperimentConfig};
use slowfast_core::error::Error;
use slowfast_core::experiments::{
    self, convergence_experiment, drift_oracle, khasminskii_schedule, CouplingMode,
};
use slowfast_core::integrators::{
    integrate_averaged, integrate_coupled, FastSystem, SlowSystem,
};
use slowfast_core::measures::{
    estimate_evolution_measure, tightness_proxy, TestFunctionDictionary,
};
use slowfast_core::noise::NoiseSpec;
use slowfast_core::records::{
    trajectory_summary_jsonl, trajectory_to_csv, write_measure_csv, write_run_record, RunRecord,
};
use slowfast_core::signals::APSignal;
use slowfast_core::spectral::FieldState;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "slowfast",
    about = "Simulation and verification suite for slow-fast stochastic reaction-diffusion systems",
    version
)]
struct Cli {
    /// JSON experiment config; the built-in linear validation config is
    /// used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: runs/<config-hash-prefix>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the scale-ratio list, e.g. --eps 0.5,0.2,0.1.
    #[arg(long, global = true, value_delimiter = ',')]
    eps: Option<Vec<f64>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One coupled slow-fast run at the first scale ratio.
    Simulate,
    /// Build the evolution measure at sampled times and run its diagnostics.
    Measure {
        /// Times at which to sample the measure.
        #[arg(long, value_delimiter = ',', default_value = "0.0")]
        times: Vec<f64>,
    },
    /// Estimate the averaged drift at the configured start state.
    Bbar,
    /// Integrate the averaged equation.
    Average,
    /// The convergence experiment over the scale-ratio grid.
    Sweep {
        /// Use an independent slow-noise stream for the averaged twin.
        #[arg(long)]
        independent_noise: bool,
    },
    /// Run the invariant suite and print one line per check.
    Check,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::linear_validation(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(eps) = &cli.eps {
        cfg.sweep.eps = eps.clone();
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    match &cli.out {
        Some(p) => Ok(p.clone()),
        None => {
            let hash = cfg.hash()?;
            Ok(PathBuf::from("runs").join(&hash[..12]))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    let built = cfg.build()?;
    let dir = out_dir(&cli, &cfg)?;
    match &cli.command {
        Command::Simulate => simulate(&built, &dir),
        Command::Measure { times } => measure(&built, times, &dir),
        Command::Bbar => bbar(&built, &dir),
        Command::Average => average(&built, &dir),
        Command::Sweep { independent_noise } => sweep(&built, *independent_noise, &dir),
        Command::Check => check(&built),
    }
}

fn fast_system(built: &BuiltSystem) -> FastSystem<'_> {
    FastSystem::new(
        &built.fast_model,
        &built.operator,
        &built.coefficients,
        built.config.dynamics.alpha,
    )
}

fn simulate(built: &BuiltSystem, dir: &Path) -> Result<(), Error> {
    let epsilon = built.config.sweep.eps[0];
    let slow = SlowSystem {
        model: &built.slow_model,
    };
    let fast = fast_system(built);
    let rec = integrate_coupled(
        &slow,
        &fast,
        &built.coefficients,
        &built.stepping(epsilon),
        &built.x0,
        &built.y0,
        &NoiseSpec::new(built.config.seed, 0),
        &NoiseSpec::new(built.config.seed, 1),
        1,
        None,
    )?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trajectory.csv"), trajectory_to_csv(&rec))?;
    std::fs::write(dir.join("trajectory.jsonl"), trajectory_summary_jsonl(&rec))?;
    write_manifest(built, dir)?;
    println!(
        "simulated coupled run at eps = {epsilon}: {} macro steps, final |u| = {:.4}, |v| = {:.4}",
        rec.times.len() - 1,
        rec.slow_sup.last().unwrap(),
        rec.fast_sup.last().unwrap()
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn measure(built: &BuiltSystem, times: &[f64], dir: &Path) -> Result<(), Error> {
    let fast = fast_system(built);
    let t_burn = experiments::calibrated_t_burn(built)?;
    let params = built.measure_params(t_burn);
    let mut stream = 0u64;
    std::fs::create_dir_all(dir)?;
    let mut diagnostics = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        let mut m = estimate_evolution_measure(&fast, &built.x0, t, &params, built.config.seed, stream)?;
        stream += params.n_members as u64;
        let quantiles = tightness_proxy(&mut m, &built.fast_model, 0.3, &[0.5, 0.9])?;
        let p2 = m.sup_norm_moment(&built.fast_model, 2.0);
        write_measure_csv(&mut m, &built.fast_model, dir, &format!("measure_{i}"))?;
        println!(
            "measure at t = {t}: {} members, E|y|^2 = {:.4}, Hoelder medians {:.4}/{:.4}",
            params.n_members, p2, quantiles[0], quantiles[1]
        );
        diagnostics.push(serde_json::json!({
            "t": t,
            "members": params.n_members,
            "t_burn": params.t_burn,
            "sup_norm_second_moment": p2,
            "hoelder_q50": quantiles[0],
            "hoelder_q90": quantiles[1],
        }));
    }
    std::fs::write(
        dir.join("measure_diagnostics.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(diagnostics))?,
    )?;
    write_manifest(built, dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn bbar(built: &BuiltSystem, dir: &Path) -> Result<(), Error> {
    let fast = fast_system(built);
    let t_burn = experiments::calibrated_t_burn(built)?;
    let ergodic_params = slowfast_core::averaging::ErgodicParams {
        horizon: built.config.averaging.horizon,
        s0: 0.0,
        t_burn,
        dt: built.config.measures.dt,
        n_paths: built.config.averaging.n_paths,
    };
    let mut ergodic =
        estimate_bbar_ergodic(&fast, &built.x0, &ergodic_params, built.config.seed, 0)?;
    let period = 2.0 * std::f64::consts::PI;
    let grid: Vec<f64> = (0..=16).map(|i| i as f64 * period / 16.0).collect();
    let mp = slowfast_core::averaging::MeasureAverageParams {
        time_grid: grid,
        measure: built.measure_params(t_burn),
    };
    let mut measure_est = estimate_bbar_measure(
        &fast,
        &built.x0,
        &mp,
        built.config.seed,
        1_000_000,
    )?;
    std::fs::create_dir_all(dir)?;
    let report = serde_json::json!({
        "ergodic": {
            "method": ergodic.method.tag(),
            "horizon": ergodic.horizon,
            "error_estimate": ergodic.error_estimate,
            "modes": ergodic.drift.modes(&built.slow_model),
        },
        "measure": {
            "method": measure_est.method.tag(),
            "horizon": measure_est.horizon,
            "error_estimate": measure_est.error_estimate,
            "modes": measure_est.drift.modes(&built.slow_model),
        },
    });
    std::fs::write(dir.join("bbar.json"), serde_json::to_string_pretty(&report)?)?;
    write_manifest(built, dir)?;
    println!(
        "averaged drift estimates written; ergodic error {:.2e}, measure error {:.2e}",
        ergodic.error_estimate, measure_est.error_estimate
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn average(built: &BuiltSystem, dir: &Path) -> Result<(), Error> {
    let slow = SlowSystem {
        model: &built.slow_model,
    };
    let fast = fast_system(built);
    let oracle = drift_oracle(built, &fast)?;
    let rec = integrate_averaged(
        &slow,
        &built.coefficients,
        oracle.as_ref(),
        built.config.dynamics.dt_macro,
        built.config.dynamics.horizon,
        &built.x0,
        &NoiseSpec::new(built.config.seed, 0),
        1,
    )?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("averaged.csv"), trajectory_to_csv(&rec))?;
    std::fs::write(dir.join("averaged.jsonl"), trajectory_summary_jsonl(&rec))?;
    write_manifest(built, dir)?;
    println!(
        "averaged run ({}): final |u| = {:.4}",
        oracle.tag(),
        rec.slow_sup.last().unwrap()
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep(built: &BuiltSystem, independent: bool, dir: &Path) -> Result<(), Error> {
    let mode = if independent {
        CouplingMode::IndependentNoise
    } else {
        CouplingMode::CommonNoise
    };
    let mut record = convergence_experiment(built, mode)?;
    // Companion series: freeze-window deviations (with the default
    // truncation radius active) and averaging remainders per scale ratio.
    // The freeze windows only fit when delta_eps < horizon; otherwise the
    // diagnostic is undefined and skipped with a note.
    let clamp = experiments::default_clamp(built);
    match experiments::deviation_sweep(built, 16, Some(clamp)) {
        Ok((_, deviation_rows)) => record.series.extend(deviation_rows),
        Err(Error::InvalidArgument(msg)) => {
            println!("note: freeze-window series skipped ({msg})")
        }
        Err(e) => return Err(e),
    }
    let probe = FieldState::mode(&built.slow_model, 0, 1.0);
    let (_, remainder_rows) = experiments::remainder_sweep(built, 8, &probe)?;
    record.series.extend(remainder_rows);
    write_run_record(&record, dir)?;
    println!(
        "sweep over eps = {:?}, eta = {:.4}:",
        built.config.sweep.eps,
        record.manifest.eta.unwrap()
    );
    for s in &record.summaries {
        println!(
            "  eps = {:<6} exceedance = {:>5.3} [{:.3}, {:.3}]  gap median = {:.4}",
            s.epsilon, s.wilson.proportion, s.wilson.low, s.wilson.high, s.gap_median
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn check(built: &BuiltSystem) -> Result<(), Error> {
    let mut all_ok = true;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {:<44} {}", if ok { "PASS" } else { "FAIL" }, name, detail);
        all_ok &= ok;
    };

    // Orthonormality of both eigenbases.
    let defect = built
        .slow_model
        .max_gram_defect()
        .max(built.fast_model.max_gram_defect());
    report(
        "eigenbasis orthonormality < 1e-10",
        defect < 1e-10,
        format!("max defect {defect:.2e}"),
    );

    // Semigroup law on a random field.
    let model = &built.slow_model;
    let coeffs: Vec<f64> = (0..model.k_modes()).map(|k| 1.0 / (k + 1) as f64).collect();
    let mut once = FieldState::from_modes(coeffs.clone(), model.n_nodes());
    slowfast_core::spectral::semigroup_apply(model, &mut once, 0.7, 0.2)?;
    let mut twice = FieldState::from_modes(coeffs.clone(), model.n_nodes());
    slowfast_core::spectral::semigroup_apply(model, &mut twice, 0.3, 0.2)?;
    slowfast_core::spectral::semigroup_apply(model, &mut twice, 0.4, 0.2)?;
    let semi_defect = once
        .modes(model)
        .iter()
        .zip(twice.modes(model))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    report(
        "semigroup composition law < 1e-12",
        semi_defect < 1e-12,
        format!("defect {semi_defect:.2e}"),
    );

    // Two-parameter evolution law with the configured modulation.
    let mut once = FieldState::from_modes(coeffs.clone(), model.n_nodes());
    slowfast_core::spectral::evolution_apply(&built.operator, model, &mut once, 0.1, 1.7, 0.5, 1.0)?;
    let mut split = FieldState::from_modes(coeffs, model.n_nodes());
    slowfast_core::spectral::evolution_apply(&built.operator, model, &mut split, 0.1, 0.9, 0.5, 1.0)?;
    slowfast_core::spectral::evolution_apply(&built.operator, model, &mut split, 0.9, 1.7, 0.5, 1.0)?;
    let evo_defect = once
        .modes(model)
        .iter()
        .zip(split.modes(model))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    report(
        "evolution two-parameter law < 1e-12",
        evo_defect < 1e-12,
        format!("defect {evo_defect:.2e}"),
    );

    // Hypothesis rejection: summability violation must fail to build.
    let mut bad = built.config.clone();
    bad.model.fast_noise.rho = 6.0;
    bad.model.fast_noise.beta = 2.0;
    let rejected = matches!(bad.build(), Err(e) if e.exit_code() == 2);
    report(
        "summability violation rejected (exit 2)",
        rejected,
        String::new(),
    );

    // Gamma positivity rejection.
    let mut bad = built.config.clone();
    bad.operator.gamma = APSignal::sine(2.0, 1.0).with_offset(1.0);
    let rejected = matches!(bad.build(), Err(e) if e.exit_code() == 2);
    report("gamma bound violation rejected (exit 2)", rejected, String::new());

    // Freeze-window schedule monotonicity.
    let mut ratios_ok = true;
    let mut prev_ratio = 0.0;
    let mut prev_delta = f64::INFINITY;
    for eps in [0.5, 0.2, 0.1, 0.05] {
        let delta = khasminskii_schedule(eps, built.config.sweep.kappa, f64::INFINITY)?;
        ratios_ok &= delta / eps > prev_ratio && delta < prev_delta;
        prev_ratio = delta / eps;
        prev_delta = delta;
    }
    report(
        "freeze window shrinks while window/eps grows",
        ratios_ok,
        String::new(),
    );

    // Reproducibility spot check: one trial, twice.
    let fast = fast_system(built);
    let oracle = drift_oracle(built, &fast)?;
    let mut small = built.config.clone();
    small.dynamics.horizon = (small.dynamics.horizon / 10.0).max(10.0 * small.dynamics.dt_macro);
    let small_built = small.build()?;
    let a = experiments::convergence_trial(
        &small_built,
        oracle.as_ref(),
        built.config.sweep.eps[0],
        (0, 1, 2),
        CouplingMode::CommonNoise,
    )?;
    let b = experiments::convergence_trial(
        &small_built,
        oracle.as_ref(),
        built.config.sweep.eps[0],
        (0, 1, 2),
        CouplingMode::CommonNoise,
    )?;
    report(
        "trial replay is bitwise identical",
        a == b && a.is_finite(),
        format!("gap {a:.6e}"),
    );

    // Dictionary functionals respect the combined Lipschitz bound.
    let dict = TestFunctionDictionary::standard(&built.fast_model);
    let mut f1 = FieldState::mode(&built.fast_model, 0, 0.5);
    let mut f2 = FieldState::mode(&built.fast_model, 0, 0.6);
    let mut lip_ok = true;
    for j in 0..dict.len() {
        let a = dict.eval(j, &mut f1, &built.fast_model);
        let b = dict.eval(j, &mut f2, &built.fast_model);
        lip_ok &= a.abs() <= 1.0 && (a - b).abs() <= 0.1 + 1e-12;
    }
    report("dictionary functionals bounded and Lipschitz", lip_ok, String::new());

    if all_ok {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Error::invalid("invariant check suite failed"))
    }
}

fn write_manifest(built: &BuiltSystem, dir: &Path) -> Result<(), Error> {
    let record = RunRecord::new(&built.config)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&record.manifest)?,
    )?;
    Ok(())
}
