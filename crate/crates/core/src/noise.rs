//! Reproducible Q-Wiener sampling in the spectral basis.
//!
//! Increments are produced by a counter-based generator keyed by
//! (seed, stream, branch, step, mode, draw): the same key always yields the
//! same Gaussian, independent of evaluation order or worker count. The
//! two-sided process needed for pullback runs uses one branch for t >= 0 and
//! an independent branch for t < 0.

use crate::error::{Error, Result};
use crate::spectral::{FieldState, SpectralModel, TimeDependentOperator};
use crate::coefficients::CoefficientSet;

/// Which side of the two-sided Wiener process a key addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Forward,
    Backward,
}

impl Branch {
    /// Routing convention: t >= 0 is forward, t < 0 backward.
    pub fn for_time(t: f64) -> Branch {
        if t >= 0.0 {
            Branch::Forward
        } else {
            Branch::Backward
        }
    }

    fn tag(self) -> u64 {
        match self {
            Branch::Forward => 0x706c7573,
            Branch::Backward => 0x6d696e75,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[inline]
fn mix_key(seed: u64, stream: u64, branch: Branch, step: u64, mode: u64, draw: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream);
    h = splitmix64(h ^ branch.tag());
    h = splitmix64(h ^ step);
    h = splitmix64(h ^ mode);
    splitmix64(h ^ draw)
}

#[inline]
fn to_unit(bits: u64) -> f64 {
    // 53 significant bits, open at 0 so the log below is finite.
    (((bits >> 11) as f64) + 0.5) * (1.0 / 9007199254740992.0)
}

/// Standard normal via Box-Muller from two keyed uniforms.
#[inline]
fn standard_normal(seed: u64, stream: u64, branch: Branch, step: u64, mode: u64) -> f64 {
    let u1 = to_unit(mix_key(seed, stream, branch, step, mode, 0));
    let u2 = to_unit(mix_key(seed, stream, branch, step, mode, 1));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Key-addressed sampler for one trajectory's noise. Distinct trajectories
/// use distinct stream ids; there is no shared mutable state.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub seed: u64,
    pub stream: u64,
}

/// One block of per-mode Wiener increments over a step of width dt, already
/// scaled by the noise eigenvalues: `inc_k = lambda_k sqrt(dt) N(0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrementBlock {
    pub dt: f64,
    pub increments: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(seed: u64, stream: u64) -> Self {
        NoiseSpec { seed, stream }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        NoiseSpec {
            seed: self.seed,
            stream,
        }
    }

    /// Per-mode increments keyed by (branch, step).
    pub fn sample_increments(
        &self,
        model: &SpectralModel,
        branch: Branch,
        step: u64,
        dt: f64,
    ) -> Result<WienerIncrementBlock> {
        if dt <= 0.0 {
            return Err(Error::invalid("increment width must be positive"));
        }
        let sqrt_dt = dt.sqrt();
        let increments = model
            .noise_lambdas
            .iter()
            .enumerate()
            .map(|(k, &lam)| {
                lam * sqrt_dt * standard_normal(self.seed, self.stream, branch, step, k as u64)
            })
            .collect();
        Ok(WienerIncrementBlock { dt, increments })
    }

    /// Raw standard normals (unscaled), for integrators that apply the
    /// eigenvalue scaling themselves.
    pub fn standard_normals(&self, branch: Branch, step: u64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = standard_normal(self.seed, self.stream, branch, step, k as u64);
        }
    }

    /// Increment over the absolute grid cell containing t, with the branch
    /// picked by the sign convention of the two-sided process.
    pub fn sample_increments_at(
        &self,
        model: &SpectralModel,
        t: f64,
        dt: f64,
    ) -> Result<WienerIncrementBlock> {
        if dt <= 0.0 {
            return Err(Error::invalid("increment width must be positive"));
        }
        let cell = (t / dt).floor();
        let branch = Branch::for_time(cell * dt);
        let step = if cell >= 0.0 {
            cell as u64
        } else {
            (-cell) as u64 - 1
        };
        self.sample_increments(model, branch, step, dt)
    }
}

/// Ito (left-point) stochastic convolution of the fast diffusion against the
/// evolution operator:
/// `sum_i U(t, r_i) P_K[ g2(r_i, v(r_i)) dW_i ]`
/// for a path `v` sampled at the increment grid over [s, t]. The pointwise
/// product lives on the collocation grid and is projected to the retained
/// modes before the per-mode multiplier is applied.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_convolution(
    op: &TimeDependentOperator,
    coeffs: &CoefficientSet,
    model: &SpectralModel,
    path: &[FieldState],
    s: f64,
    t: f64,
    shift: f64,
    epsilon: f64,
    spec: &NoiseSpec,
) -> Result<FieldState> {
    if path.len() < 2 {
        return Err(Error::invalid("stochastic_convolution needs at least 2 path samples"));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let n_steps = path.len() - 1;
    let dt = (t - s) / n_steps as f64;
    let n = model.n_nodes();
    let k_modes = model.k_modes();
    let mut acc = vec![0.0; k_modes];
    let mut dw_nodal = vec![0.0; n];
    let mut prod_modes = vec![0.0; k_modes];
    let mut mults = vec![0.0; k_modes];
    for i in 0..n_steps {
        let r = s + i as f64 * dt;
        let block = self_block(spec, model, r, i, dt)?;
        model.to_nodal(&block.increments, &mut dw_nodal);
        let mut v = path[i].clone();
        let v_nodal = v.nodal(model);
        let mut prod = vec![0.0; n];
        for j in 0..n {
            prod[j] = coeffs.g2_eval(r, v_nodal[j]) * dw_nodal[j];
        }
        model.to_modes(&prod, &mut prod_modes);
        crate::spectral::evolution_multipliers(op, model, r, t, shift, epsilon, &mut mults);
        for k in 0..k_modes {
            acc[k] += mults[k] * prod_modes[k];
        }
    }
    Ok(FieldState::from_modes(acc, n))
}

fn self_block(
    spec: &NoiseSpec,
    model: &SpectralModel,
    r: f64,
    local_step: usize,
    dt: f64,
) -> Result<WienerIncrementBlock> {
    spec.sample_increments(model, Branch::for_time(r), local_step as u64, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{power_law_lambdas, BoundaryKind};
    use crate::coefficients::presets;
    use crate::signals::APSignal;

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

    #[test]
    fn identical_keys_identical_blocks() {
        let m = model();
        let spec = NoiseSpec::new(7, 3);
        let a = spec.sample_increments(&m, Branch::Forward, 11, 0.01).unwrap();
        let b = spec.sample_increments(&m, Branch::Forward, 11, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mode_variance_matches_lambda_squared_dt() {
        let m = model();
        let spec = NoiseSpec::new(99, 0);
        let dt = 0.02;
        let n = 100_000usize;
        for mode in 0..m.k_modes() {
            let mut draws = Vec::with_capacity(n);
            for step in 0..n {
                let block = spec
                    .sample_increments(&m, Branch::Forward, step as u64, dt)
                    .unwrap();
                draws.push(block.increments[mode]);
            }
            let target = m.noise_lambdas[mode] * m.noise_lambdas[mode] * dt;
            let var = crate::stats::variance(&draws);
            let se = crate::stats::variance_standard_error(target, n);
            assert!(
                (var - target).abs() < 3.0 * se,
                "mode {mode}: var {var}, target {target}, 3se {}",
                3.0 * se
            );
            let mean = crate::stats::mean(&draws);
            assert!(mean.abs() < 3.0 * (target / n as f64).sqrt());
        }
    }

    #[test]
    fn cross_mode_independence() {
        let m = model();
        let spec = NoiseSpec::new(5, 1);
        let n = 100_000usize;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for step in 0..n {
            let block = spec
                .sample_increments(&m, Branch::Forward, step as u64, 1.0)
                .unwrap();
            a.push(block.increments[0]);
            b.push(block.increments[2]);
        }
        let r = crate::stats::correlation(&a, &b);
        assert!(r.abs() < 3.0 / (n as f64).sqrt(), "correlation {r}");
    }

    #[test]
    fn branch_routing_at_zero_is_forward() {
        let m = model();
        let spec = NoiseSpec::new(1, 0);
        let at_zero = spec.sample_increments_at(&m, 0.0, 0.5).unwrap();
        let forward = spec.sample_increments(&m, Branch::Forward, 0, 0.5).unwrap();
        assert_eq!(at_zero, forward);
    }

    #[test]
    fn two_sided_branches_independent() {
        let m = model();
        let spec = NoiseSpec::new(123, 4);
        let n = 100_000usize;
        let mut fwd = Vec::with_capacity(n);
        let mut bwd = Vec::with_capacity(n);
        for step in 0..n {
            fwd.push(
                spec.sample_increments(&m, Branch::Forward, step as u64, 1.0)
                    .unwrap()
                    .increments[0],
            );
            bwd.push(
                spec.sample_increments(&m, Branch::Backward, step as u64, 1.0)
                    .unwrap()
                    .increments[0],
            );
        }
        let r = crate::stats::correlation(&fwd, &bwd);
        assert!(r.abs() < 3.0 / (n as f64).sqrt(), "correlation {r}");
    }

    #[test]
    fn negative_time_queries_are_deterministic() {
        let m = model();
        let spec = NoiseSpec::new(77, 2);
        let a = spec.sample_increments_at(&m, -0.3, 0.1).unwrap();
        let b = spec.sample_increments_at(&m, -0.3, 0.1).unwrap();
        assert_eq!(a, b);
        // And lives on the backward branch.
        let c = spec.sample_increments(&m, Branch::Backward, 2, 0.1).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_diffusion_gives_zero_convolution() {
        let m = model();
        let op = TimeDependentOperator::constant_gamma(1.0);
        let coeffs = presets::linear_validation(1.0, 0.0, 1.0, 0.0, 0.0);
        let path: Vec<FieldState> = (0..11).map(|_| FieldState::zero(&m)).collect();
        let spec = NoiseSpec::new(3, 0);
        let mut out =
            stochastic_convolution(&op, &coeffs, &m, &path, 0.0, 1.0, 0.5, 1.0, &spec).unwrap();
        assert!(out.sup_norm(&m) == 0.0);
    }

    #[test]
    fn constant_diffusion_variance_matches_ou_formula() {
        // For g2 = g0 and gamma = gamma0 the mode-k convolution is an OU
        // integral with variance g0^2 lambda_k^2 (1 - e^{-2 r (t-s)}) / (2 r),
        // r = gamma0 alpha_k + shift.
        let m = model();
        let gamma0 = 1.0;
        let op = TimeDependentOperator {
            gamma: APSignal::constant(gamma0),
            transport: Vec::new(),
        };
        let g0 = 0.7;
        let coeffs = presets::linear_validation(1.0, 0.0, 1.0, 0.0, g0);
        let (s, t, shift) = (0.0, 1.0, 0.5);
        let n_steps = 200usize;
        let path: Vec<FieldState> = (0..=n_steps).map(|_| FieldState::zero(&m)).collect();
        let n_paths = 10_000usize;
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); m.k_modes()];
        for p in 0..n_paths {
            let spec = NoiseSpec::new(2024, p as u64);
            let mut out =
                stochastic_convolution(&op, &coeffs, &m, &path, s, t, shift, 1.0, &spec).unwrap();
            let modes = out.modes(&m).to_vec();
            for (k, v) in modes.iter().enumerate() {
                samples[k].push(*v);
            }
        }
        for k in 0..m.k_modes() {
            let r = gamma0 * m.alphas[k] + shift;
            let lam = m.noise_lambdas[k];
            let target = g0 * g0 * lam * lam * (1.0 - (-2.0 * r * (t - s)).exp()) / (2.0 * r);
            let var = crate::stats::variance(&samples[k]);
            let se = crate::stats::variance_standard_error(target, n_paths);
            // 3 SE Monte Carlo band plus the O(dt) left-point quadrature bias.
            let bias_allowance = target * 2.5 * r * ((t - s) / n_steps as f64);
            assert!(
                (var - target).abs() < 3.0 * se + bias_allowance,
                "mode {k}: var {var}, target {target}"
            );
        }
    }

    #[test]
    fn convolution_refines_at_strong_order_half() {
        // Halving dt on a common refinement changes the result by O(sqrt(dt)).
        let m = model();
        let op = TimeDependentOperator::constant_gamma(1.0);
        let spec = NoiseSpec::new(11, 0);
        let (s, t, shift) = (0.0, 1.0, 0.0);
        // Coarse sum over 2h cells assembled from the same fine increments:
        // evaluate the coarse Riemann sum manually against the fine one.
        let fine_steps = 512usize;
        let dt = (t - s) / fine_steps as f64;
        let mut fine = vec![0.0; m.k_modes()];
        let mut coarse = vec![0.0; m.k_modes()];
        let mut mults = vec![0.0; m.k_modes()];
        for i in 0..fine_steps {
            let r = s + i as f64 * dt;
            let block = spec
                .sample_increments(&m, Branch::Forward, i as u64, dt)
                .unwrap();
            crate::spectral::evolution_multipliers(&op, &m, r, t, shift, 1.0, &mut mults);
            for k in 0..m.k_modes() {
                fine[k] += 0.5 * mults[k] * block.increments[k];
            }
            // Coarse multiplier frozen at the left edge of the 2-cell.
            let r_coarse = s + (i - i % 2) as f64 * dt;
            crate::spectral::evolution_multipliers(&op, &m, r_coarse, t, shift, 1.0, &mut mults);
            for k in 0..m.k_modes() {
                coarse[k] += 0.5 * mults[k] * block.increments[k];
            }
        }
        let diff: f64 = fine
            .iter()
            .zip(&coarse)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // O(sqrt(dt)) scale: the difference should be well below one dt^{1/4}
        // of the magnitude and far from zero percent-wise is not required.
        assert!(diff < 0.5 * dt.sqrt().sqrt(), "refinement diff {diff}");
    }
}
