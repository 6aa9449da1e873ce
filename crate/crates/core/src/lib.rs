//! Calibration concordance for multi-instrument count data.
//!
//! Measured counts `c_ij` of source `j` by instrument `i` are modelled as
//! `log(c_ij / T_ij) ~ Normal(B_i + G_j - v_i / 2, v_i)` where `B_i = log A_i` is
//! the log effective area, `G_j = log F_j` the log flux and `v_i` the per-instrument
//! log-scale variance. The `-v_i / 2` half-variance correction keeps
//! `E[c_ij] = T_ij A_i F_j` on the natural scale.
//!
//! The crate provides a conditional-maximization mode finder with the
//! self-weighted variance shrinkage, four posterior samplers behind a common
//! [`samplers::Sampler`] trait, convergence and agreement diagnostics, and
//! synthetic data generators.

pub mod config;
pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod geweke;
pub mod samplers;
pub mod synth;
pub mod twoway;

pub use domain::{
    CalibrationPrior, DrawSequence, Entry, InstrumentPrior, LogScaleData, Method, Model,
    NormalPrior, ObservationTable, ParameterState, VariancePrior, V_MIN,
};
pub use error::{Error, Result};
pub use estimators::{fit_mode, FitTarget, ModeConfig, ModeFitResult};
pub use samplers::{Sampler, SamplerConfig, SamplerRegistry};
