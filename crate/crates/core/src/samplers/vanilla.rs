//! Single-site Gibbs sampler: every `B_i`, then every `G_j`, then every `v_i`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::{DrawSequence, Method, Model, ParameterState, V_MIN};
use crate::error::Result;
use crate::estimators::instrument_residuals;
use crate::samplers::conditionals::update_variance_conditional;
use crate::samplers::gig::sample_gig;
use crate::samplers::{run_kernel, ChainRng, Sampler, SamplerConfig, TransitionKernel};

/// Normal full conditional `(mean, sd)` of `B_i`.
pub(crate) fn log_area_conditional(model: &Model, state: &ParameterState, i: usize) -> (f64, f64) {
    let data = &model.data;
    let p = &model.prior.instruments[i].log_area;
    let v = state.variance[i];
    let n = data.instrument_count(i) as f64;
    let prec = p.precision() + n / v;
    let sum: f64 = data
        .instrument_entries(i)
        .iter()
        .map(|&k| {
            let e = &data.entries()[k];
            e.y - state.log_flux[e.source] + 0.5 * v
        })
        .sum();
    let mean = (p.precision() * p.location + sum / v) / prec;
    (mean, prec.sqrt().recip())
}

/// Normal full conditional `(mean, sd)` of `G_j`.
pub(crate) fn log_flux_conditional(model: &Model, state: &ParameterState, j: usize) -> (f64, f64) {
    let data = &model.data;
    let p = &model.prior.sources[j];
    let mut prec = p.precision();
    let mut num = prec * p.location;
    for &k in data.source_entries(j) {
        let e = &data.entries()[k];
        let v = state.variance[e.instrument];
        prec += 1.0 / v;
        num += (e.y - state.log_area[e.instrument] + 0.5 * v) / v;
    }
    (num / prec, prec.sqrt().recip())
}

/// Draws every `v_i` from its GIG full conditional.
pub(crate) fn draw_variances(
    model: &Model,
    state: &mut ParameterState,
    rng: &mut ChainRng,
) -> Result<()> {
    for i in 0..model.n_instruments() {
        let r = instrument_residuals(&model.data, state, i);
        let g = update_variance_conditional(i, &r, &model.prior.instruments[i].variance)?;
        state.variance[i] = sample_gig(&g, rng).max(V_MIN);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VanillaGibbsKernel;

impl TransitionKernel for VanillaGibbsKernel {
    fn transition(
        &mut self,
        model: &Model,
        state: &mut ParameterState,
        rng: &mut ChainRng,
    ) -> Result<()> {
        for i in 0..model.n_instruments() {
            let (m, sd) = log_area_conditional(model, state, i);
            let z: f64 = rng.sample(StandardNormal);
            state.log_area[i] = m + sd * z;
        }
        for j in 0..model.n_sources() {
            let (m, sd) = log_flux_conditional(model, state, j);
            let z: f64 = rng.sample(StandardNormal);
            state.log_flux[j] = m + sd * z;
        }
        draw_variances(model, state, rng)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VanillaGibbs;

impl Sampler for VanillaGibbs {
    fn method(&self) -> Method {
        Method::VanillaGibbs
    }

    fn run_chain(&self, model: &Model, config: &SamplerConfig, chain: u32) -> Result<DrawSequence> {
        let mut cfg = config.clone();
        cfg.method = Method::VanillaGibbs;
        run_kernel(&mut VanillaGibbsKernel, model, &cfg, chain)
    }
}
