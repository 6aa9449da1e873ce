//! Posterior samplers.
//!
//! Every algorithm implements [`Sampler`] and is registered by name in a
//! [`SamplerRegistry`]; callers pick one at runtime from a method tag.

mod block;
pub mod conditionals;
mod exact;
pub mod gig;
mod hmc;
mod vanilla;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{DrawSequence, Method, Model, ParameterState, V_MIN};
use crate::error::{Error, Result};
use crate::estimators::{fit_mode, ModeConfig};

pub use block::{conditional_mean_draw, BlockGibbs, BlockGibbsKernel};
pub use conditionals::{marginal_log_density_v, update_variance_conditional};
pub use exact::{propriety_smoke_test, Envelope, ExactIid, ProprietyReport};
pub use gig::{sample_gig, GigParams};
pub use hmc::{leapfrog_energy_error, Hmc, HmcKernel, UnconstrainedTarget};
pub use vanilla::{VanillaGibbs, VanillaGibbsKernel};

/// Chain RNG: ChaCha20 keyed by the master seed, one stream per chain.
pub type ChainRng = ChaCha20Rng;

pub fn chain_rng(seed: u64, chain: u32) -> ChainRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(chain) + 1);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmcSettings {
    /// Fixed step size; `None` adapts it during warmup.
    pub step_size: Option<f64>,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    /// Relative post-warmup step-size jitter.
    pub jitter: f64,
}

impl Default for HmcSettings {
    fn default() -> Self {
        Self {
            step_size: None,
            leapfrog_steps: 20,
            target_accept: 0.8,
            jitter: 0.1,
        }
    }
}

/// Shape of the per-instrument main proposal component in the exact sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EnvelopeShape {
    /// GIG fitted to the marginal log density along each coordinate.
    #[default]
    SliceMatched,
    /// GIG full conditional at the posterior-mode residuals.
    ModeConditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactSettings {
    /// Safety margin δ added to log K, in nats.
    pub margin: f64,
    pub max_proposals: u64,
    pub shape: EnvelopeShape,
    /// Mixture weight of the heavy-tailed defensive component.
    pub defensive_weight: f64,
    /// Run the propriety smoke test when some variance prior is improper.
    pub check_propriety: bool,
}

impl Default for ExactSettings {
    fn default() -> Self {
        Self {
            margin: 0.5,
            max_proposals: 20_000_000,
            shape: EnvelopeShape::SliceMatched,
            defensive_weight: 0.1,
            check_propriety: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    /// Total iterations per chain including warmup.
    pub iterations: usize,
    pub warmup: usize,
    pub chains: usize,
    pub seed: u64,
    pub hmc: HmcSettings,
    pub exact: ExactSettings,
}

impl SamplerConfig {
    pub fn new(method: Method, iterations: usize, warmup: usize, seed: u64) -> Self {
        Self {
            method,
            iterations,
            warmup,
            chains: 1,
            seed,
            hmc: HmcSettings::default(),
            exact: ExactSettings::default(),
        }
    }

    pub fn with_chains(mut self, chains: usize) -> Self {
        self.chains = chains;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.chains == 0 {
            return Err(Error::Usage("iterations and chains must be positive".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Usage(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        let t = self.hmc.target_accept;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Usage(format!("target acceptance {t} not in (0, 1)")));
        }
        if let Some(e) = self.hmc.step_size {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Usage(format!("step size {e} must be positive")));
            }
        }
        if !(self.hmc.jitter >= 0.0 && self.hmc.jitter < 1.0) {
            return Err(Error::Usage("step-size jitter must be in [0, 1)".into()));
        }
        let w = self.exact.defensive_weight;
        if !(w > 0.0 && w < 1.0) {
            return Err(Error::Usage("defensive weight must be in (0, 1)".into()));
        }
        if !(self.exact.margin >= 0.0) {
            return Err(Error::Usage("envelope margin must be nonnegative".into()));
        }
        Ok(())
    }

    /// Number of retained draws per chain.
    pub fn kept(&self) -> usize {
        self.iterations - self.warmup
    }
}

/// A posterior sampling algorithm.
pub trait Sampler: Send + Sync {
    fn method(&self) -> Method;

    /// Runs one chain; deterministic in `(model, config, chain)`.
    fn run_chain(&self, model: &Model, config: &SamplerConfig, chain: u32) -> Result<DrawSequence>;
}

/// One Markov transition targeting the posterior of a fixed model.
pub trait TransitionKernel {
    fn transition(
        &mut self,
        model: &Model,
        state: &mut ParameterState,
        rng: &mut ChainRng,
    ) -> Result<()>;
}

/// Name → sampler lookup.
pub struct SamplerRegistry {
    samplers: BTreeMap<String, Box<dyn Sampler>>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl SamplerRegistry {
    pub fn empty() -> Self {
        Self {
            samplers: BTreeMap::new(),
        }
    }

    /// Registry holding the four built-in samplers.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(VanillaGibbs));
        r.register(Box::new(BlockGibbs));
        r.register(Box::new(Hmc));
        r.register(Box::new(ExactIid));
        r
    }

    pub fn register(&mut self, sampler: Box<dyn Sampler>) {
        self.samplers
            .insert(sampler.method().as_str().to_string(), sampler);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Sampler> {
        self.samplers.get(name).map(|s| s.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.samplers.keys().map(String::as_str)
    }

    /// Runs `config.chains` chains of the sampler registered for `config.method`,
    /// concurrently, returning them in chain order.
    pub fn run(&self, model: &Model, config: &SamplerConfig) -> Result<Vec<DrawSequence>> {
        config.validate()?;
        let sampler = self
            .get(config.method.as_str())
            .ok_or_else(|| Error::Usage(format!("no sampler registered for {}", config.method)))?;
        run_chains(sampler, model, config)
    }
}

/// Runs independent chains on scoped threads; output order is chain order.
pub fn run_chains(
    sampler: &dyn Sampler,
    model: &Model,
    config: &SamplerConfig,
) -> Result<Vec<DrawSequence>> {
    config.validate()?;
    let results: Vec<Result<DrawSequence>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains as u32)
            .map(|c| scope.spawn(move || sampler.run_chain(model, config, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Starting point for MCMC chains: the posterior mode with a small chain-specific jitter.
pub(crate) fn initial_state(model: &Model, rng: &mut ChainRng) -> Result<ParameterState> {
    let fit = fit_mode(model, &ModeConfig::default())?;
    let mut s = fit.state;
    for x in s.log_area.iter_mut().chain(s.log_flux.iter_mut()) {
        let z: f64 = rng.sample(StandardNormal);
        *x += 0.05 * z;
    }
    for v in &mut s.variance {
        let z: f64 = rng.sample(StandardNormal);
        *v = (v.max(1e-6) * (0.1 * z).exp()).max(V_MIN);
    }
    Ok(s)
}

/// Drives a transition kernel for `iterations`, keeping the post-warmup states.
pub(crate) fn run_kernel<K: TransitionKernel>(
    kernel: &mut K,
    model: &Model,
    config: &SamplerConfig,
    chain: u32,
) -> Result<DrawSequence> {
    config.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let mut state = initial_state(model, &mut rng)?;
    let mut draws = Vec::with_capacity(config.kept());
    for it in 0..config.iterations {
        kernel.transition(model, &mut state, &mut rng)?;
        if it >= config.warmup {
            draws.push(state.clone());
        }
    }
    DrawSequence::new(
        config.method,
        chain,
        config.seed,
        config.warmup,
        draws,
        Default::default(),
    )
}
