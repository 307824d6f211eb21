//! Spatial discretization on a 1-D interval: eigenbasis of the second-order
//! elliptic operators, nodal/spectral field representations, semigroup and
//! evolution-operator actions.
//!
//! Everything is diagonal in the eigenbasis, so operator actions are per-mode
//! multipliers. Collocation grids are chosen so that discrete orthonormality
//! of the retained eigenfunctions is exact up to rounding:
//! - Dirichlet: interior equispaced nodes (discrete sine orthogonality),
//! - Neumann: midpoint nodes (discrete cosine orthogonality).

use crate::error::{Error, Result};
use crate::signals::APSignal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
}

/// Uniform collocation grid on [0, L]. Dirichlet grids keep interior nodes
/// only (the boundary values vanish identically); Neumann grids use cell
/// midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub length: f64,
    pub nodes: Vec<f64>,
    /// Quadrature weight of every node (uniform for both layouts).
    pub weight: f64,
}

impl SpatialGrid {
    pub fn new(boundary: BoundaryKind, length: f64, n_nodes: usize) -> Result<Self> {
        if length <= 0.0 {
            return Err(Error::invalid("grid length must be positive"));
        }
        if n_nodes < 2 {
            return Err(Error::invalid("grid needs at least 2 nodes"));
        }
        let (nodes, weight) = match boundary {
            BoundaryKind::Dirichlet => {
                let h = length / (n_nodes + 1) as f64;
                ((1..=n_nodes).map(|j| j as f64 * h).collect::<Vec<_>>(), h)
            }
            BoundaryKind::Neumann => {
                let h = length / n_nodes as f64;
                (
                    (0..n_nodes)
                        .map(|j| (j as f64 + 0.5) * h)
                        .collect::<Vec<_>>(),
                    h,
                )
            }
        };
        Ok(SpatialGrid {
            length,
            nodes,
            weight,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Eigenpairs of the diffusion operator together with the noise eigenvalues
/// and the summability exponents they are validated against.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    pub boundary: BoundaryKind,
    pub grid: SpatialGrid,
    /// Eigenvalues of -A (non-negative, increasing).
    pub alphas: Vec<f64>,
    /// basis[k][j] = e_k(xi_j), row-major K x N.
    basis: Vec<f64>,
    /// deriv[k][j] = e_k'(xi_j).
    deriv: Vec<f64>,
    /// Noise eigenvalues lambda_k >= 0, one per retained mode.
    pub noise_lambdas: Vec<f64>,
    /// Summability exponent rho in (2, inf].
    pub rho: f64,
    /// Summability exponent beta in (0, inf).
    pub beta: f64,
}

impl SpectralModel {
    /// Analytic eigenpairs of the 1-D second-derivative operator on (0, L).
    ///
    /// Dirichlet: alpha_k = (k pi / L)^2, e_k = sqrt(2/L) sin(k pi xi / L),
    /// k = 1..K. Neumann: alpha_0 = 0 with constant e_0 = 1/sqrt(L), then
    /// alpha_k = (k pi / L)^2, e_k = sqrt(2/L) cos(k pi xi / L), k = 1..K-1.
    pub fn new(
        boundary: BoundaryKind,
        k_modes: usize,
        n_nodes: usize,
        length: f64,
        noise_lambdas: Vec<f64>,
        rho: f64,
        beta: f64,
    ) -> Result<Self> {
        if k_modes < 1 {
            return Err(Error::invalid("need at least one mode"));
        }
        if n_nodes < 2 * k_modes + 1 {
            return Err(Error::config(format!(
                "n_nodes = {n_nodes} violates the anti-aliasing bound 2K+1 = {}",
                2 * k_modes + 1
            )));
        }
        if noise_lambdas.len() != k_modes {
            return Err(Error::invalid("one noise eigenvalue per mode required"));
        }
        if noise_lambdas.iter().any(|l| *l < 0.0) {
            return Err(Error::invalid("noise eigenvalues must be non-negative"));
        }
        let grid = SpatialGrid::new(boundary, length, n_nodes)?;
        let pi = std::f64::consts::PI;
        let mut alphas = Vec::with_capacity(k_modes);
        let mut basis = vec![0.0; k_modes * n_nodes];
        let mut deriv = vec![0.0; k_modes * n_nodes];
        match boundary {
            BoundaryKind::Dirichlet => {
                let scale = (2.0 / length).sqrt();
                for k in 1..=k_modes {
                    let freq = k as f64 * pi / length;
                    alphas.push(freq * freq);
                    for (j, &xi) in grid.nodes.iter().enumerate() {
                        basis[(k - 1) * n_nodes + j] = scale * (freq * xi).sin();
                        deriv[(k - 1) * n_nodes + j] = scale * freq * (freq * xi).cos();
                    }
                }
            }
            BoundaryKind::Neumann => {
                let scale = (2.0 / length).sqrt();
                alphas.push(0.0);
                let c0 = 1.0 / length.sqrt();
                for j in 0..n_nodes {
                    basis[j] = c0;
                    deriv[j] = 0.0;
                }
                for k in 1..k_modes {
                    let freq = k as f64 * pi / length;
                    alphas.push(freq * freq);
                    for (j, &xi) in grid.nodes.iter().enumerate() {
                        basis[k * n_nodes + j] = scale * (freq * xi).cos();
                        deriv[k * n_nodes + j] = -scale * freq * (freq * xi).sin();
                    }
                }
            }
        }
        let model = SpectralModel {
            boundary,
            grid,
            alphas,
            basis,
            deriv,
            noise_lambdas,
            rho,
            beta,
        };
        model.validate_summability()?;
        Ok(model)
    }

    /// Validates the spectral summability constraint beta (rho - 2) / rho < 1
    /// and finiteness of the two mode sums over the retained modes.
    fn validate_summability(&self) -> Result<()> {
        if !(self.rho > 2.0) {
            return Err(Error::config(format!("rho = {} must exceed 2", self.rho)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("beta = {} must be positive", self.beta)));
        }
        let ratio = if self.rho.is_infinite() {
            self.beta
        } else {
            self.beta * (self.rho - 2.0) / self.rho
        };
        if ratio >= 1.0 {
            return Err(Error::config(format!(
                "spectral exponents rejected: beta (rho - 2) / rho = {ratio:.4} >= 1 (rho = {}, beta = {})",
                self.rho, self.beta
            )));
        }
        let (kappa, zeta) = self.mode_sums();
        if !kappa.is_finite() || !zeta.is_finite() {
            return Err(Error::config("mode sums kappa/zeta are not finite"));
        }
        Ok(())
    }

    /// (kappa, zeta) = (sum lambda_k^rho |e_k|_inf^2, sum alpha_k^-beta |e_k|_inf^2),
    /// zero-eigenvalue modes excluded from the second sum.
    pub fn mode_sums(&self) -> (f64, f64) {
        let n = self.grid.n_nodes();
        let mut kappa = 0.0;
        let mut zeta = 0.0;
        for k in 0..self.k_modes() {
            let sup = self.basis[k * n..(k + 1) * n]
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            let lam = self.noise_lambdas[k];
            kappa += if self.rho.is_infinite() {
                if lam > 1.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                lam.powf(self.rho) * sup * sup
            };
            if self.alphas[k] > 0.0 {
                zeta += self.alphas[k].powf(-self.beta) * sup * sup;
            }
        }
        (kappa, zeta)
    }

    pub fn k_modes(&self) -> usize {
        self.alphas.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn basis_row(&self, k: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.basis[k * n..(k + 1) * n]
    }

    /// Synthesis: nodal values from spectral coefficients.
    pub fn to_nodal(&self, modes: &[f64], out: &mut [f64]) {
        let n = self.n_nodes();
        debug_assert_eq!(modes.len(), self.k_modes());
        debug_assert_eq!(out.len(), n);
        out.fill(0.0);
        for (k, &c) in modes.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &self.basis[k * n..(k + 1) * n];
            for j in 0..n {
                out[j] += c * row[j];
            }
        }
    }

    /// Analysis: spectral coefficients by discrete quadrature. Exact inverse
    /// of `to_nodal` for fields band-limited to the retained modes.
    pub fn to_modes(&self, nodal: &[f64], out: &mut [f64]) {
        let n = self.n_nodes();
        debug_assert_eq!(nodal.len(), n);
        debug_assert_eq!(out.len(), self.k_modes());
        for k in 0..self.k_modes() {
            let row = &self.basis[k * n..(k + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * nodal[j];
            }
            out[k] = acc * self.grid.weight;
        }
    }

    /// Spatial derivative at the nodes from spectral coefficients.
    pub fn deriv_to_nodal(&self, modes: &[f64], out: &mut [f64]) {
        let n = self.n_nodes();
        out.fill(0.0);
        for (k, &c) in modes.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &self.deriv[k * n..(k + 1) * n];
            for j in 0..n {
                out[j] += c * row[j];
            }
        }
    }

    /// Gram matrix of the retained eigenfunctions under the discrete
    /// quadrature; diagnostics for the orthonormality invariant.
    pub fn gram_matrix(&self) -> Vec<Vec<f64>> {
        let k_modes = self.k_modes();
        let n = self.n_nodes();
        let mut gram = vec![vec![0.0; k_modes]; k_modes];
        for a in 0..k_modes {
            for b in 0..k_modes {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += self.basis[a * n + j] * self.basis[b * n + j];
                }
                gram[a][b] = acc * self.grid.weight;
            }
        }
        gram
    }

    pub fn max_gram_defect(&self) -> f64 {
        let gram = self.gram_matrix();
        let mut defect = 0.0f64;
        for (a, row) in gram.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                let target = if a == b { 1.0 } else { 0.0 };
                defect = defect.max((v - target).abs());
            }
        }
        defect
    }
}

/// Power-law noise eigenvalues lambda_k = amplitude * k^exponent over the
/// 1-based mode positions.
pub fn power_law_lambdas(k_modes: usize, amplitude: f64, exponent: f64) -> Vec<f64> {
    (1..=k_modes)
        .map(|k| amplitude * (k as f64).powf(exponent))
        .collect()
}

/// Which representation of a field is current.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Repr {
    Nodal,
    Spectral,
    Both,
}

/// A function on the interval, carried in nodal and/or spectral form.
/// Conversions are lazy and require the model that defines the basis.
#[derive(Debug, Clone)]
pub struct FieldState {
    nodal: Vec<f64>,
    spectral: Vec<f64>,
    repr: Repr,
}

impl FieldState {
    pub fn from_nodal(values: Vec<f64>, k_modes: usize) -> Self {
        FieldState {
            spectral: vec![0.0; k_modes],
            nodal: values,
            repr: Repr::Nodal,
        }
    }

    pub fn from_modes(coefficients: Vec<f64>, n_nodes: usize) -> Self {
        FieldState {
            nodal: vec![0.0; n_nodes],
            spectral: coefficients,
            repr: Repr::Spectral,
        }
    }

    pub fn zero(model: &SpectralModel) -> Self {
        FieldState {
            nodal: vec![0.0; model.n_nodes()],
            spectral: vec![0.0; model.k_modes()],
            repr: Repr::Both,
        }
    }

    /// Single eigenmode with the given coefficient.
    pub fn mode(model: &SpectralModel, k: usize, coefficient: f64) -> Self {
        let mut spectral = vec![0.0; model.k_modes()];
        spectral[k] = coefficient;
        let mut f = FieldState::from_modes(spectral, model.n_nodes());
        f.sync(model);
        f
    }

    pub fn sync(&mut self, model: &SpectralModel) {
        match self.repr {
            Repr::Nodal => {
                model.to_modes(&self.nodal, &mut self.spectral);
                self.repr = Repr::Both;
            }
            Repr::Spectral => {
                model.to_nodal(&self.spectral, &mut self.nodal);
                self.repr = Repr::Both;
            }
            Repr::Both => {}
        }
    }

    pub fn nodal(&mut self, model: &SpectralModel) -> &[f64] {
        if self.repr == Repr::Spectral {
            self.sync(model);
        }
        &self.nodal
    }

    pub fn modes(&mut self, model: &SpectralModel) -> &[f64] {
        if self.repr == Repr::Nodal {
            self.sync(model);
        }
        &self.spectral
    }

    /// Nodal values without conversion; panics if not current.
    pub fn nodal_ref(&self) -> &[f64] {
        assert!(self.repr != Repr::Spectral, "nodal representation not current");
        &self.nodal
    }

    /// Spectral coefficients without conversion; panics if not current.
    pub fn modes_ref(&self) -> &[f64] {
        assert!(self.repr != Repr::Nodal, "spectral representation not current");
        &self.spectral
    }

    /// Discrete sup-norm over the collocation nodes.
    pub fn sup_norm(&mut self, model: &SpectralModel) -> f64 {
        self.nodal(model)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&mut self, model: &SpectralModel) -> f64 {
        let w = model.grid.weight;
        self.nodal(model)
            .iter()
            .map(|v| v * v * w)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        let vals = match self.repr {
            Repr::Nodal => &self.nodal,
            _ => &self.spectral,
        };
        vals.iter().all(|v| v.is_finite())
    }

    /// Discrete theta-Hoelder seminorm over all node pairs.
    pub fn hoelder_seminorm(&mut self, model: &SpectralModel, theta: f64) -> f64 {
        let nodes = model.grid.nodes.clone();
        let vals = self.nodal(model);
        let mut sup = 0.0f64;
        for i in 0..vals.len() {
            for j in (i + 1)..vals.len() {
                let d = (vals[i] - vals[j]).abs() / (nodes[j] - nodes[i]).powf(theta);
                sup = sup.max(d);
            }
        }
        sup
    }

    pub fn scaled(&self, factor: f64) -> FieldState {
        let mut out = self.clone();
        for v in &mut out.nodal {
            *v *= factor;
        }
        for v in &mut out.spectral {
            *v *= factor;
        }
        out
    }
}

/// The time-dependent fast operator: a periodic / almost-periodic scalar
/// modulation of the diffusion operator plus an optional first-order
/// transport term `u -> l(t, xi) u'(xi)`.
#[derive(Debug, Clone)]
pub struct TimeDependentOperator {
    /// Modulation gamma(t); must stay within positive bounds.
    pub gamma: APSignal,
    /// Transport terms, each a time signal times a spatial profile on the
    /// collocation nodes. Empty means no first-order part.
    pub transport: Vec<TransportTerm>,
}

#[derive(Debug, Clone)]
pub struct TransportTerm {
    pub time: APSignal,
    /// Profile sampled on the collocation nodes.
    pub profile: Vec<f64>,
}

impl TimeDependentOperator {
    pub fn constant_gamma(gamma0: f64) -> Self {
        TimeDependentOperator {
            gamma: APSignal::constant(gamma0),
            transport: Vec::new(),
        }
    }

    /// Integrated modulation over [s, t] by the closed-form antiderivative.
    pub fn gamma_integral(&self, s: f64, t: f64) -> f64 {
        self.gamma.integral(s, t)
    }

    pub fn has_transport(&self) -> bool {
        !self.transport.is_empty()
    }

    /// Transport coefficient l(t, xi_j) on the nodes, accumulated into `out`.
    pub fn transport_at(&self, t: f64, out: &mut [f64]) {
        out.fill(0.0);
        for term in &self.transport {
            let a = term.time.evaluate(t);
            if a == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(term.profile.iter()) {
                *o += a * p;
            }
        }
    }

    /// Sampled positivity bounds of gamma over a few slow periods.
    pub fn gamma_bounds(&self) -> (f64, f64) {
        let horizon = if self.gamma.max_frequency() > 0.0 {
            8.0 * 2.0 * std::f64::consts::PI / self.gamma.max_frequency()
        } else {
            1.0
        };
        self.gamma.sampled_range(0.0, horizon, 4096)
    }
}

/// Per-mode semigroup action `c_k -> exp(-(alpha_k + shift) t) c_k`.
pub fn semigroup_apply(
    model: &SpectralModel,
    field: &mut FieldState,
    t: f64,
    shift: f64,
) -> Result<()> {
    if t < 0.0 {
        return Err(Error::invalid("semigroup time must be non-negative"));
    }
    let modes = field.modes(model).to_vec();
    let mut out = vec![0.0; modes.len()];
    for (k, &c) in modes.iter().enumerate() {
        out[k] = (-(model.alphas[k] + shift) * t).exp() * c;
    }
    *field = FieldState::from_modes(out, model.n_nodes());
    Ok(())
}

/// Per-mode evolution-operator action over [s, t] with damping `shift` and
/// scale ratio `epsilon`:
/// `c_k -> exp(-(gamma_int(s,t) alpha_k + shift (t - s)) / epsilon) c_k`.
pub fn evolution_apply(
    op: &TimeDependentOperator,
    model: &SpectralModel,
    field: &mut FieldState,
    s: f64,
    t: f64,
    shift: f64,
    epsilon: f64,
) -> Result<()> {
    if t < s {
        return Err(Error::invalid("evolution interval requires s <= t"));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let gamma_int = op.gamma_integral(s, t);
    let modes = field.modes(model).to_vec();
    let mut out = vec![0.0; modes.len()];
    for (k, &c) in modes.iter().enumerate() {
        out[k] = (-(gamma_int * model.alphas[k] + shift * (t - s)) / epsilon).exp() * c;
    }
    *field = FieldState::from_modes(out, model.n_nodes());
    Ok(())
}

/// Per-mode multipliers of the evolution operator, for hot loops.
pub fn evolution_multipliers(
    op: &TimeDependentOperator,
    model: &SpectralModel,
    s: f64,
    t: f64,
    shift: f64,
    epsilon: f64,
    out: &mut [f64],
) {
    let gamma_int = op.gamma_integral(s, t);
    for (k, o) in out.iter_mut().enumerate() {
        *o = (-(gamma_int * model.alphas[k] + shift * (t - s)) / epsilon).exp();
    }
}

/// Convolution of the first-order term against the evolution operator:
/// `(1/eps) \int_s^t U(t, r) l(r, .) u'(r, .) dr` for a path `u` sampled
/// uniformly on [s, t], discretized by the trapezoid rule.
pub fn psi_convolution(
    op: &TimeDependentOperator,
    model: &SpectralModel,
    path: &[FieldState],
    s: f64,
    t: f64,
    shift: f64,
    epsilon: f64,
) -> Result<FieldState> {
    if path.len() < 2 {
        return Err(Error::invalid("psi_convolution needs at least 2 time samples"));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let n = model.n_nodes();
    let k_modes = model.k_modes();
    let dt = (t - s) / (path.len() - 1) as f64;
    let mut acc = vec![0.0; k_modes];
    let mut deriv = vec![0.0; n];
    let mut l_nodal = vec![0.0; n];
    let mut term_modes = vec![0.0; k_modes];
    let mut mults = vec![0.0; k_modes];
    for (i, field) in path.iter().enumerate() {
        let r = s + i as f64 * dt;
        let mut f = field.clone();
        let modes = f.modes(model).to_vec();
        model.deriv_to_nodal(&modes, &mut deriv);
        op.transport_at(r, &mut l_nodal);
        for j in 0..n {
            deriv[j] *= l_nodal[j];
        }
        model.to_modes(&deriv, &mut term_modes);
        evolution_multipliers(op, model, r, t, shift, epsilon, &mut mults);
        let w = if i == 0 || i == path.len() - 1 { 0.5 } else { 1.0 };
        for k in 0..k_modes {
            acc[k] += w * dt / epsilon * mults[k] * term_modes[k];
        }
    }
    Ok(FieldState::from_modes(acc, n))
}
