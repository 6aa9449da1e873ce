//! Joint-distribution ("getting it right") test of a transition kernel.
//!
//! Two simulators of `p(θ, y)` are compared. The marginal-conditional one draws
//! `θ` from the prior independently each cycle. The successive-conditional one
//! alternates a kernel transition `θ | y` with a fresh `y | θ`. If the kernel
//! leaves the posterior invariant both produce prior draws of `θ`, so the
//! moments of every parameter must agree.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::ess;
use crate::domain::{CalibrationPrior, LogScaleData, Model, ParameterState, VariancePrior, V_MIN};
use crate::error::{Error, Result};
use crate::samplers::{chain_rng, ChainRng, TransitionKernel};

pub const GEWEKE_MAX_Z: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GewekeConfig {
    pub cycles: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeRow {
    pub name: String,
    pub marginal_mean: f64,
    pub marginal_se: f64,
    pub successive_mean: f64,
    pub successive_se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeReport {
    pub rows: Vec<GewekeRow>,
    pub max_z: f64,
    pub pass: bool,
}

/// Draws `θ` from a fully proper prior.
pub fn sample_prior(prior: &CalibrationPrior, rng: &mut ChainRng) -> Result<ParameterState> {
    let normal = |loc: f64, sd: f64, rng: &mut ChainRng| -> Result<f64> {
        if !sd.is_finite() {
            return Err(Error::Usage("prior simulation needs proper mean priors".into()));
        }
        let z: f64 = rng.sample(StandardNormal);
        Ok(loc + sd * z)
    };
    let mut b = Vec::with_capacity(prior.instruments.len());
    let mut v = Vec::with_capacity(prior.instruments.len());
    for p in &prior.instruments {
        b.push(normal(p.log_area.location, p.log_area.spread, rng)?);
        let VariancePrior::InverseGamma { shape, scale } = p.variance else {
            return Err(Error::Usage("prior simulation needs proper variance priors".into()));
        };
        let g = Gamma::new(shape, 1.0 / scale).map_err(|e| Error::Domain(e.to_string()))?;
        v.push((1.0 / g.sample(rng)).max(V_MIN));
    }
    let g = prior
        .sources
        .iter()
        .map(|p| normal(p.location, p.spread, rng))
        .collect::<Result<Vec<_>>>()?;
    ParameterState::new(b, g, v)
}

/// Draws `y | θ` on the design of `data`.
pub fn sample_data(data: &LogScaleData, state: &ParameterState, rng: &mut ChainRng) -> Result<LogScaleData> {
    let ys: Vec<f64> = data
        .entries()
        .iter()
        .map(|e| {
            let v = state.variance[e.instrument];
            let z: f64 = rng.sample(StandardNormal);
            state.log_area[e.instrument] + state.log_flux[e.source] - 0.5 * v + v.sqrt() * z
        })
        .collect();
    data.with_values(&ys)
}

fn statistics(s: &ParameterState) -> Vec<f64> {
    let x = s.to_vec();
    x.iter().copied().chain(x.iter().map(|v| v * v)).collect()
}

fn stat_names(n: usize, m: usize) -> Vec<String> {
    let base: Vec<String> = (0..n)
        .map(|i| format!("log_area[{i}]"))
        .chain((0..m).map(|j| format!("log_flux[{j}]")))
        .chain((0..n).map(|i| format!("variance[{i}]")))
        .collect();
    base.iter()
        .cloned()
        .chain(base.iter().map(|b| format!("{b}^2")))
        .collect()
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0);
    (mu, var.sqrt())
}

/// Runs both simulators for `config.cycles` cycles on the design and prior of
/// `design` and compares first and second moments of `(B, G, v)`.
pub fn geweke_test(
    design: &Model,
    kernel: &mut dyn TransitionKernel,
    config: &GewekeConfig,
) -> Result<GewekeReport> {
    if config.cycles < 10 {
        return Err(Error::Usage("Geweke test needs at least 10 cycles".into()));
    }
    let prior = &design.prior;
    let (n, m) = (design.n_instruments(), design.n_sources());

    let mut rng = chain_rng(config.seed, 0);
    let marginal: Vec<Vec<f64>> = (0..config.cycles)
        .map(|_| sample_prior(prior, &mut rng).map(|s| statistics(&s)))
        .collect::<Result<_>>()?;

    let mut rng = chain_rng(config.seed, 1);
    let mut state = sample_prior(prior, &mut rng)?;
    let mut model = Model {
        data: sample_data(&design.data, &state, &mut rng)?,
        prior: prior.clone(),
    };
    let mut successive = Vec::with_capacity(config.cycles);
    for _ in 0..config.cycles {
        kernel.transition(&model, &mut state, &mut rng)?;
        model.data = sample_data(&design.data, &state, &mut rng)?;
        successive.push(statistics(&state));
    }

    let names = stat_names(n, m);
    let mut rows = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let a: Vec<f64> = marginal.iter().map(|s| s[k]).collect();
        let b: Vec<f64> = successive.iter().map(|s| s[k]).collect();
        let (ma, sa) = mean_sd(&a);
        let (mb, sb) = mean_sd(&b);
        let se_a = sa / (a.len() as f64).sqrt();
        let se_b = sb / ess(&b).unwrap_or(1.0).min(b.len() as f64).sqrt();
        let z = (ma - mb).abs() / (se_a * se_a + se_b * se_b).sqrt();
        rows.push(GewekeRow {
            name,
            marginal_mean: ma,
            marginal_se: se_a,
            successive_mean: mb,
            successive_se: se_b,
            z,
        });
    }
    let max_z = rows.iter().map(|r| r.z).fold(0.0, f64::max);
    Ok(GewekeReport {
        pass: max_z < GEWEKE_MAX_Z,
        rows,
        max_z,
    })
}
