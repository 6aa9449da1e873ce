//! Block Gibbs: joint Gaussian draw of `(B, G)` given `v`, then each `v_i`.

use crate::domain::{DrawSequence, Method, Model, ParameterState};
use crate::error::Result;
use crate::samplers::vanilla::draw_variances;
use crate::samplers::{run_kernel, ChainRng, Sampler, SamplerConfig, TransitionKernel};
use crate::twoway::MeanSystem;

/// Exact draw of `(B, G) | v, y` from the two-way Gaussian block.
pub fn conditional_mean_draw(
    model: &Model,
    variance: &[f64],
    rng: &mut ChainRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sys = MeanSystem::new(model, variance)?;
    Ok(sys.draw(rng))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BlockGibbsKernel;

impl TransitionKernel for BlockGibbsKernel {
    fn transition(
        &mut self,
        model: &Model,
        state: &mut ParameterState,
        rng: &mut ChainRng,
    ) -> Result<()> {
        let (b, g) = conditional_mean_draw(model, &state.variance, rng)?;
        state.log_area = b;
        state.log_flux = g;
        draw_variances(model, state, rng)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BlockGibbs;

impl Sampler for BlockGibbs {
    fn method(&self) -> Method {
        Method::BlockGibbs
    }

    fn run_chain(&self, model: &Model, config: &SamplerConfig, chain: u32) -> Result<DrawSequence> {
        let mut cfg = config.clone();
        cfg.method = Method::BlockGibbs;
        run_kernel(&mut BlockGibbsKernel, model, &cfg, chain)
    }
}
