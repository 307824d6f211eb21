//! Simulation and verification suite for slow-fast systems of stochastic
//! reaction-diffusion equations on a 1-D interval, where the fast equation
//! has time-dependent (periodic or almost-periodic) coefficients.
//!
//! The crate builds the evolution family of measures of the fast equation by
//! pullback sampling, estimates the averaged drift by ergodic time-averaging,
//! integrates the averaged equation, and measures how fast the slow component
//! of the coupled system approaches the averaged solution as the scale ratio
//! shrinks.
//!
//! Module map:
//! - [`signals`]: almost-periodic scalar signals (trigonometric polynomials),
//!   mean values, translation-set scans.
//! - [`spectral`]: eigenbasis of the elliptic operators, fields in nodal and
//!   spectral form, semigroup / evolution-operator actions.
//! - [`coefficients`]: reaction and diffusion coefficient registry, Nemytskii
//!   (composition) operators, slow-variable truncation.
//! - [`noise`]: reproducible counter-based Q-Wiener sampling, two-sided
//!   streams for pullback runs, stochastic convolutions.
//! - [`integrators`]: exponential Euler time stepping for the frozen-fast,
//!   coupled, and averaged equations.
//! - [`measures`]: empirical evolution measures, dual-Lipschitz distances,
//!   evolution-property residuals, mixing and tightness diagnostics.
//! - [`averaging`]: averaged-drift estimation (ergodic and measure-based),
//!   closed forms for linear validation configs, regularity probes.
//! - [`config`]: experiment configuration, hypothesis validation, run ids.
//! - [`records`]: run records and their on-disk formats.
//! - [`experiments`]: window schedules, auxiliary-process deviation,
//!   remainder series, and the headline convergence sweep.

pub mod averaging;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod experiments;
pub mod integrators;
pub mod measures;
pub mod noise;
pub mod records;
pub mod signals;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
