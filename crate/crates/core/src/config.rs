//! Experiment configuration: everything needed to reconstruct a run, with
//! machine-checked hypothesis constraints at load time and a canonical hash
//! that serves as the run id.

use crate::coefficients::{CoefficientSet, DiffusionCoeff};
use crate::error::{Error, Result};
use crate::integrators::CoupledStepping;
use crate::measures::MeasureParams;
use crate::signals::APSignal;
use crate::spectral::{
    power_law_lambdas, BoundaryKind, FieldState, SpectralModel, TimeDependentOperator,
    TransportTerm,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Power-law noise spectrum with its summability exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRule {
    pub amplitude: f64,
    pub exponent: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for NoiseRule {
    fn default() -> Self {
        NoiseRule {
            amplitude: 1.0,
            exponent: -1.0,
            rho: 3.0,
            beta: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub boundary: BoundaryKind,
    pub k_modes: usize,
    /// 0 selects the smallest anti-aliasing grid 2K + 1.
    #[serde(default)]
    pub n_nodes: usize,
    pub domain_length: f64,
    pub slow_noise: NoiseRule,
    pub fast_noise: NoiseRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            boundary: BoundaryKind::Dirichlet,
            k_modes: 8,
            n_nodes: 0,
            domain_length: std::f64::consts::PI,
            slow_noise: NoiseRule::default(),
            fast_noise: NoiseRule::default(),
        }
    }
}

/// Band-limited field as (1-based mode index, coefficient) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FieldInit {
    pub modes: Vec<(usize, f64)>,
}

impl FieldInit {
    pub fn single(mode: usize, coefficient: f64) -> Self {
        FieldInit {
            modes: vec![(mode, coefficient)],
        }
    }

    pub fn build(&self, model: &SpectralModel) -> Result<FieldState> {
        let mut coeffs = vec![0.0; model.k_modes()];
        for &(idx, c) in &self.modes {
            if idx == 0 || idx > model.k_modes() {
                return Err(Error::config(format!(
                    "field mode index {idx} outside 1..={}",
                    model.k_modes()
                )));
            }
            coeffs[idx - 1] += c;
        }
        Ok(FieldState::from_modes(coeffs, model.n_nodes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub time: APSignal,
    /// Constant spatial profile; richer profiles go through mode index.
    pub profile_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub gamma: APSignal,
    #[serde(default)]
    pub transport: Vec<TransportConfig>,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            gamma: APSignal::constant(1.0),
            transport: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Fixed damping in the fast equation.
    pub alpha: f64,
    pub dt_macro: f64,
    /// Fast step rule dt_fast = min(dt_macro, c_dt * epsilon).
    pub c_dt: f64,
    pub horizon: f64,
    pub x0: FieldInit,
    pub y0: FieldInit,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            alpha: 1.0,
            dt_macro: 1e-3,
            c_dt: 0.05,
            horizon: 1.0,
            x0: FieldInit::single(1, 1.0),
            y0: FieldInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Scale ratios, descending.
    pub eps: Vec<f64>,
    /// Window exponent of the freeze schedule.
    pub kappa: f64,
    pub trials: usize,
    /// Exceedance threshold; None means 0.2 x the averaged solution's
    /// sup-norm scale from a pilot run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            eps: vec![0.5, 0.2, 0.1, 0.05],
            kappa: 1.0,
            trials: 50,
            eta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuresConfig {
    pub ensemble: usize,
    /// None selects 5 / rate from a pilot mixing fit, falling back to
    /// 5 / alpha when the pilot is inconclusive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_burn: Option<f64>,
    pub dt: f64,
}

impl Default for MeasuresConfig {
    fn default() -> Self {
        MeasuresConfig {
            ensemble: 2048,
            t_burn: None,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftOracleKind {
    ClosedFormLinear,
    Hmm,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingConfig {
    pub drift: DriftOracleKind,
    pub horizon: f64,
    pub n_paths: usize,
    /// Micro budget of the on-demand estimator.
    pub hmm_paths: usize,
    pub hmm_horizon: f64,
    #[serde(default)]
    pub cache: bool,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        AveragingConfig {
            drift: DriftOracleKind::ClosedFormLinear,
            horizon: 100.0,
            n_paths: 64,
            hmm_paths: 64,
            hmm_horizon: 10.0,
            cache: false,
        }
    }
}

/// Complete, serializable description of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub operator: OperatorConfig,
    pub coefficients: CoefficientSet,
    pub dynamics: DynamicsConfig,
    pub sweep: SweepConfig,
    pub measures: MeasuresConfig,
    pub averaging: AveragingConfig,
    pub seed: u64,
}

impl Default for CoefficientSet {
    fn default() -> Self {
        crate::coefficients::presets::linear_validation(1.0, 0.5, 1.0, 0.1, 0.5)
    }
}

/// Runtime objects built from a validated config.
#[derive(Debug)]
pub struct BuiltSystem {
    pub slow_model: SpectralModel,
    pub fast_model: SpectralModel,
    pub operator: TimeDependentOperator,
    pub coefficients: CoefficientSet,
    pub x0: FieldState,
    pub y0: FieldState,
    pub config: ExperimentConfig,
}

impl BuiltSystem {
    pub fn stepping(&self, epsilon: f64) -> CoupledStepping {
        CoupledStepping {
            epsilon,
            dt_macro: self.config.dynamics.dt_macro,
            c_dt: self.config.dynamics.c_dt,
            horizon: self.config.dynamics.horizon,
        }
    }

    pub fn measure_params(&self, t_burn: f64) -> MeasureParams {
        MeasureParams {
            t_burn,
            dt: self.config.measures.dt,
            n_members: self.config.measures.ensemble,
        }
    }

    /// Burn-in default: the configured value, or 5 / (slowest mixing rate)
    /// with the crude rate gamma_min alpha_1 + alpha as the fallback scale.
    pub fn default_t_burn(&self) -> f64 {
        if let Some(t) = self.config.measures.t_burn {
            return t;
        }
        let (gamma_min, _) = self.operator.gamma_bounds();
        let rate = gamma_min * self.fast_model.alphas[0] + self.config.dynamics.alpha;
        5.0 / rate.max(1e-6)
    }
}

impl ExperimentConfig {
    /// Validate every machine-checkable hypothesis and construct the
    /// runtime system. Failures carry exit code 2.
    pub fn build(&self) -> Result<BuiltSystem> {
        // Scale and stepping sanity.
        if self.sweep.trials < 1 {
            return Err(Error::config("sweep needs at least one trial"));
        }
        if self.sweep.kappa <= 0.0 {
            return Err(Error::config("kappa must be positive"));
        }
        if self.sweep.eps.is_empty() {
            return Err(Error::config("sweep needs at least one scale ratio"));
        }
        for &eps in &self.sweep.eps {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::config(format!("epsilon = {eps} outside (0, 1]")));
            }
        }
        if self.sweep.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("scale ratios must be strictly descending"));
        }
        if self.dynamics.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        if self.measures.ensemble < 2 {
            return Err(Error::config("measure ensembles need at least 2 members"));
        }
        if self.measures.dt <= 0.0 {
            return Err(Error::config("measures.dt must be positive"));
        }
        // Modulation bounds (sampled on a dense grid over a few periods).
        let operator = TimeDependentOperator {
            gamma: self.operator.gamma.clone(),
            transport: Vec::new(),
        };
        let (gamma_min, gamma_max) = operator.gamma_bounds();
        if gamma_min <= 0.0 {
            return Err(Error::config(format!(
                "gamma violates the positivity bound: sampled minimum {gamma_min:.4}"
            )));
        }
        if !gamma_max.is_finite() {
            return Err(Error::config("gamma is unbounded"));
        }
        // Coefficient hypotheses (growth shape, dissipativity sign).
        self.coefficients.validate()?;
        // Spectral models; the summability constraint is checked inside.
        let n_nodes = if self.model.n_nodes == 0 {
            2 * self.model.k_modes + 1
        } else {
            self.model.n_nodes
        };
        let slow_model = SpectralModel::new(
            self.model.boundary,
            self.model.k_modes,
            n_nodes,
            self.model.domain_length,
            power_law_lambdas(
                self.model.k_modes,
                self.model.slow_noise.amplitude,
                self.model.slow_noise.exponent,
            ),
            self.model.slow_noise.rho,
            self.model.slow_noise.beta,
        )?;
        let fast_model = SpectralModel::new(
            self.model.boundary,
            self.model.k_modes,
            n_nodes,
            self.model.domain_length,
            power_law_lambdas(
                self.model.k_modes,
                self.model.fast_noise.amplitude,
                self.model.fast_noise.exponent,
            ),
            self.model.fast_noise.rho,
            self.model.fast_noise.beta,
        )?;
        let operator = TimeDependentOperator {
            gamma: self.operator.gamma.clone(),
            transport: self
                .operator
                .transport
                .iter()
                .map(|t| TransportTerm {
                    time: t.time.clone(),
                    profile: vec![t.profile_constant; fast_model.n_nodes()],
                })
                .collect(),
        };
        let stepping = CoupledStepping {
            epsilon: self.sweep.eps[0],
            dt_macro: self.dynamics.dt_macro,
            c_dt: self.dynamics.c_dt,
            horizon: self.dynamics.horizon,
        };
        stepping.validate()?;
        let x0 = self.dynamics.x0.build(&slow_model)?;
        let y0 = self.dynamics.y0.build(&fast_model)?;
        Ok(BuiltSystem {
            slow_model,
            fast_model,
            operator,
            coefficients: self.coefficients.clone(),
            x0,
            y0,
            config: self.clone(),
        })
    }

    /// Canonical JSON bytes: serde_json maps are ordered, so a round trip
    /// through `Value` yields a stable byte sequence.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?.into_bytes())
    }

    /// Run id: SHA-256 of the canonical bytes, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = self.canonical_bytes()?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex_string(&hasher.finalize()))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// The linear validation config used across the verification suite:
    /// b1 = fast, b2 = -fast + (c0 + c1 sin(omega t)) slow, constant
    /// diffusions, constant modulation.
    pub fn linear_validation() -> Self {
        ExperimentConfig::default()
    }

    /// Fully periodic variant (every fast-equation signal shares one
    /// period) for the almost-periodicity diagnostics.
    pub fn periodic_validation() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.operator.gamma = APSignal::sine(0.25, 1.0).with_offset(1.0);
        cfg.coefficients.g2 = DiffusionCoeff {
            amplitude: APSignal::cosine(0.1, 1.0).with_offset(0.5),
            osc_amp: 0.0,
            osc_freq: 0.0,
        };
        cfg
    }

    /// Cubic reaction variant for exploratory nonlinear runs.
    pub fn cubic_validation() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.coefficients = crate::coefficients::presets::cubic(1.0, 0.5, 1.0, 0.1, 0.5);
        cfg.averaging.drift = DriftOracleKind::Hmm;
        cfg
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
