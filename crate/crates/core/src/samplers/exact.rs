//! Independent posterior draws by rejection sampling on the variance marginal.
//!
//! The `(B, G)` block integrates out analytically, leaving an `N`-dimensional
//! target `p(v | y)`. Each `v_i` gets a proposal that mixes a GIG shaped to the
//! target with a heavy-tailed defensive inverse-gamma; the mixture keeps
//! `p(v | y) / q(v)` bounded near `v = 0` and `v = ∞`. The bound `log K` is the
//! maximum of that ratio found by search plus a margin. Any proposal found above
//! the bound discards the accepted draws and restarts with a raised bound, so
//! the output is exact whenever the run completes.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::goldensectionsearch::GoldenSectionSearch;
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::domain::{ChainStats, DrawSequence, Method, Model, ParameterState, VariancePrior, V_MIN};
use crate::error::{Error, Result};
use crate::estimators::{fit_mode, instrument_residuals, ModeConfig};
use crate::samplers::block::conditional_mean_draw;
use crate::samplers::conditionals::{marginal_log_density_v, update_variance_conditional};
use crate::samplers::gig::{sample_gig, GigParams};
use crate::samplers::{chain_rng, EnvelopeShape, ExactSettings, Sampler, SamplerConfig};

const MAX_RESTARTS: usize = 3;
const PROPRIETY_DROP: f64 = 20.0;
const PROPRIETY_SLOPE: f64 = -0.5;

/// Outcome of the numerical propriety check along one coordinate ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayCheck {
    pub instrument: usize,
    /// Fall of `log p(v | y) + log v_i` from its maximum at each end of the ray, in nats.
    pub lower_drop: f64,
    pub upper_drop: f64,
    /// Outward slope in `log v_i` at each end.
    pub lower_slope: f64,
    pub upper_slope: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprietyReport {
    pub proper: bool,
    pub rays: Vec<RayCheck>,
}

/// Checks that the variance marginal, in `log v` coordinates, decays at both
/// ends of every coordinate ray through `anchor` over `v ∈ [1e-10, 1e8]`.
///
/// A flat or rising tail means the integral in that direction does not
/// converge, so the posterior is improper.
pub fn propriety_smoke_test(model: &Model, anchor: &[f64]) -> Result<ProprietyReport> {
    let n = model.n_instruments();
    if anchor.len() != n {
        return Err(Error::Usage("propriety anchor has wrong length".into()));
    }
    let (lo, hi) = (1e-10f64.ln(), 1e8f64.ln());
    let points = 121;
    let h = (hi - lo) / (points - 1) as f64;
    let base: Vec<f64> = anchor.iter().map(|v| v.clamp(1e-8, 1e6)).collect();
    let mut rays = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = base.clone();
        let mut f = Vec::with_capacity(points);
        for k in 0..points {
            let u = lo + k as f64 * h;
            v[i] = u.exp();
            let val = marginal_log_density_v(&v, model).map(|x| x + u).unwrap_or(f64::NAN);
            f.push(val);
        }
        let finite = f.iter().all(|x| x.is_finite());
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lower_drop = max - f[0];
        let upper_drop = max - f[points - 1];
        let lower_slope = (f[0] - f[1]) / h;
        let upper_slope = (f[points - 1] - f[points - 2]) / h;
        let passed = finite
            && lower_drop >= PROPRIETY_DROP
            && upper_drop >= PROPRIETY_DROP
            && lower_slope <= PROPRIETY_SLOPE
            && upper_slope <= PROPRIETY_SLOPE;
        rays.push(RayCheck {
            instrument: i,
            lower_drop,
            upper_drop,
            lower_slope,
            upper_slope,
            passed,
        });
    }
    Ok(ProprietyReport {
        proper: rays.iter().all(|r| r.passed),
        rays,
    })
}

/// Two-component proposal for one variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureProposal {
    pub main: GigParams,
    main_log_normalizer: f64,
    /// A proper inverse-gamma law.
    pub defensive: VariancePrior,
    pub defensive_weight: f64,
}

impl MixtureProposal {
    pub fn new(main: GigParams, defensive: VariancePrior, defensive_weight: f64) -> Self {
        Self {
            main,
            main_log_normalizer: main.log_normalizer(),
            defensive,
            defensive_weight,
        }
    }

    fn log_density(&self, v: f64) -> f64 {
        let a = (1.0 - self.defensive_weight).ln() + self.main.log_kernel(v) - self.main_log_normalizer;
        let b = self.defensive_weight.ln() + self.defensive.log_density(v);
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.defensive_weight {
            sample_inverse_gamma(&self.defensive, rng)
        } else {
            sample_gig(&self.main, rng)
        }
    }
}

fn sample_inverse_gamma<R: Rng + ?Sized>(prior: &VariancePrior, rng: &mut R) -> f64 {
    let (shape, scale) = prior.shape_scale();
    let g = Gamma::new(shape, 1.0 / scale).expect("defensive law has positive parameters");
    1.0 / g.sample(rng)
}

/// Product proposal over instruments together with its rejection bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub components: Vec<MixtureProposal>,
    /// Mode of the variance marginal in `log v` coordinates, as variances.
    pub mode: Vec<f64>,
    /// Bound on `log p(v | y) - log q(v)`, margin included.
    pub log_k: f64,
    pub margin: f64,
}

impl Envelope {
    pub fn build(model: &Model, settings: &ExactSettings) -> Result<Self> {
        let n = model.n_instruments();
        let fit = fit_mode(model, &ModeConfig::default())?;
        let mode = marginal_mode(model, &fit.state.variance)?;
        let target = |v: &[f64]| marginal_log_density_v(v, model);
        let log_mode: Vec<f64> = mode.iter().map(|v| v.ln()).collect();
        let sd = log_scale_widths(model, &log_mode)?;

        let mut components = Vec::with_capacity(n);
        for i in 0..n {
            let residuals = instrument_residuals(&model.data, &fit.state, i);
            let prior = model.prior.instruments[i].variance;
            let base = update_variance_conditional(i, &residuals, &prior);
            let main = match settings.shape {
                EnvelopeShape::ModeConditional => base?,
                EnvelopeShape::SliceMatched => {
                    match slice_matched_gig(&target, &mode, i, sd[i])? {
                        Some(g) => g,
                        None => base?,
                    }
                }
            };
            let defensive = if prior.is_proper() {
                prior
            } else {
                VariancePrior::InverseGamma {
                    shape: 1.0,
                    scale: mode[i],
                }
            };
            components.push(MixtureProposal::new(main, defensive, settings.defensive_weight));
        }
        let mut env = Self {
            components,
            mode,
            log_k: 0.0,
            margin: settings.margin,
        };
        env.log_k = env.search_bound(model, &log_mode, &sd)? + settings.margin;
        Ok(env)
    }

    pub fn log_proposal(&self, v: &[f64]) -> f64 {
        self.components.iter().zip(v).map(|(c, &x)| c.log_density(x)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.components.iter().map(|c| c.sample(rng)).collect()
    }

    /// `log p(v | y) - log q(v)` up to the constant shared with `log_k`.
    pub fn log_ratio(&self, model: &Model, v: &[f64]) -> Result<f64> {
        Ok(marginal_log_density_v(v, model)? - self.log_proposal(v))
    }

    fn log_ratio_or_neg_inf(&self, model: &Model, v: &[f64]) -> f64 {
        if v.iter().any(|x| !(*x >= V_MIN && x.is_finite())) {
            return f64::NEG_INFINITY;
        }
        match self.log_ratio(model, v) {
            Ok(x) if x.is_finite() => x,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Maximum of the log ratio over proposal draws, defensive draws and axis
    /// grids, with the best candidates polished by Nelder–Mead in `log v`.
    fn search_bound(&self, model: &Model, log_mode: &[f64], sd: &[f64]) -> Result<f64> {
        let n = log_mode.len();
        let mut rng = chain_rng(0x05ee_d0f0_e11e, 0);
        let mut candidates: Vec<(f64, Vec<f64>)> = Vec::new();
        let mut push = |u: Vec<f64>| {
            let v: Vec<f64> = u.iter().map(|x| x.exp()).collect();
            let lr = self.log_ratio_or_neg_inf(model, &v);
            if lr.is_finite() {
                candidates.push((lr, u));
            }
        };
        push(log_mode.to_vec());
        for _ in 0..4000 {
            push(self.sample(&mut rng).iter().map(|v| v.ln()).collect());
        }
        for _ in 0..1000 {
            push(
                self.components
                    .iter()
                    .map(|c| sample_inverse_gamma(&c.defensive, &mut rng).ln())
                    .collect(),
            );
        }
        for i in 0..n {
            for k in 0..33 {
                let mut u = log_mode.to_vec();
                u[i] += (-8.0 + 0.5 * k as f64) * sd[i];
                push(u);
            }
        }
        if candidates.is_empty() {
            return Err(Error::Sampler("envelope search found no finite log ratio".into()));
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut best = candidates[0].0;
        for (lr, u) in candidates.iter().take(10) {
            let polished = self.polish(model, u, sd).unwrap_or(*lr);
            best = best.max(polished);
        }
        Ok(best)
    }

    fn polish(&self, model: &Model, start: &[f64], sd: &[f64]) -> Option<f64> {
        let cost = NegLogRatio { env: self, model };
        let mut simplex = vec![start.to_vec()];
        for (i, s) in sd.iter().enumerate() {
            let mut p = start.to_vec();
            p[i] += 0.5 * s;
            simplex.push(p);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-10).ok()?;
        let res = Executor::new(cost, solver)
            .configure(|s| s.max_iters(400))
            .run()
            .ok()?;
        let c = res.state().get_best_cost();
        c.is_finite().then_some(-c)
    }
}

struct NegLogRatio<'a> {
    env: &'a Envelope,
    model: &'a Model,
}

impl CostFunction for NegLogRatio<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let v: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        let lr = self.env.log_ratio_or_neg_inf(self.model, &v);
        Ok(if lr.is_finite() { -lr } else { f64::MAX })
    }
}

/// `log p(v | y) + Σ log v_i` as a function of one coordinate `log v_i`.
struct LogSlice<'a> {
    model: &'a Model,
    at: &'a [f64],
    i: usize,
}

impl LogSlice<'_> {
    fn eval(&self, u: f64) -> f64 {
        let mut v = self.at.to_vec();
        v[self.i] = u.exp();
        match marginal_log_density_v(&v, self.model) {
            Ok(x) if x.is_finite() => x + u,
            _ => f64::NEG_INFINITY,
        }
    }
}

impl CostFunction for LogSlice<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, u: &f64) -> std::result::Result<f64, argmin::core::Error> {
        let f = self.eval(*u);
        Ok(if f.is_finite() { -f } else { f64::MAX })
    }
}

/// Coordinate-wise maximization of the marginal in `log v`, started at `start`.
fn marginal_mode(model: &Model, start: &[f64]) -> Result<Vec<f64>> {
    let mut u: Vec<f64> = start.iter().map(|v| v.clamp(1e-8, 1e6).ln()).collect();
    for _sweep in 0..6 {
        let mut moved = 0.0f64;
        for i in 0..u.len() {
            let at: Vec<f64> = u.iter().map(|x| x.exp()).collect();
            let slice = LogSlice { model, at: &at, i };
            let (lo, hi) = (u[i] - 8.0, u[i] + 8.0);
            let solver = GoldenSectionSearch::new(lo, hi)
                .and_then(|s| s.with_tolerance(1e-7))
                .map_err(|e| Error::Sampler(format!("golden-section setup failed: {e}")))?;
            let res = Executor::new(slice, solver)
                .configure(|s| s.param(u[i]).max_iters(200))
                .run()
                .map_err(|e| Error::Sampler(format!("marginal mode search failed: {e}")))?;
            if let Some(&best) = res.state().get_best_param() {
                moved = moved.max((best - u[i]).abs());
                u[i] = best;
            }
        }
        if moved < 1e-6 {
            break;
        }
    }
    Ok(u.iter().map(|x| x.exp().max(V_MIN)).collect())
}

/// Curvature width of each log-scale slice at the mode; 1 where not concave.
fn log_scale_widths(model: &Model, log_mode: &[f64]) -> Result<Vec<f64>> {
    let at: Vec<f64> = log_mode.iter().map(|x| x.exp()).collect();
    let h = 0.01;
    Ok((0..log_mode.len())
        .map(|i| {
            let s = LogSlice { model, at: &at, i };
            let u = log_mode[i];
            let d2 = (s.eval(u + h) - 2.0 * s.eval(u) + s.eval(u - h)) / (h * h);
            if d2 < 0.0 && d2.is_finite() {
                (-1.0 / d2).sqrt().clamp(1e-3, 10.0)
            } else {
                1.0
            }
        })
        .collect())
}

/// Least-squares fit of a GIG log kernel to the marginal slice through `mode`
/// along coordinate `i`. Returns `None` when no valid GIG fits.
fn slice_matched_gig<F>(target: &F, mode: &[f64], i: usize, sd: f64) -> Result<Option<GigParams>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let points = 25;
    let mut xs = Vec::with_capacity(points);
    let mut ys = Vec::with_capacity(points);
    let mut v = mode.to_vec();
    for k in 0..points {
        let z = -3.0 + 6.0 * k as f64 / (points - 1) as f64;
        let x = (mode[i].ln() + z * sd).exp();
        v[i] = x;
        let f = target(&v)?;
        if f.is_finite() {
            xs.push(x);
            ys.push(f);
        }
    }
    if xs.len() < 6 {
        return Ok(None);
    }
    let features = |x: f64| [x.ln(), -0.5 / x, -0.5 * x, 1.0];
    let Some(c) = least_squares(&xs, &ys, &features, 4) else {
        return Ok(None);
    };
    let (p, chi, psi) = (c[0] + 1.0, c[1], c[2]);
    if chi > 0.0 && psi > 0.0 {
        return Ok(GigParams::new(p, chi, psi).ok());
    }
    if chi > 0.0 || psi <= 0.0 {
        // Inverse-gamma-like slice: pin psi to a negligible positive value.
        let psi = 1e-8;
        let adj: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y + 0.5 * psi * x).collect();
        let features3 = |x: f64| [x.ln(), -0.5 / x, 1.0, 0.0];
        if let Some(c) = least_squares(&xs, &adj, &features3, 3) {
            if c[1] > 0.0 {
                return Ok(GigParams::new(c[0] + 1.0, c[1], psi).ok());
            }
        }
    }
    Ok(None)
}

fn least_squares(
    xs: &[f64],
    ys: &[f64],
    features: &dyn Fn(f64) -> [f64; 4],
    k: usize,
) -> Option<Vec<f64>> {
    let rows = xs.len();
    let mut a = DMatrix::from_fn(rows, k, |r, c| features(xs[r])[c]);
    let scale: Vec<f64> = (0..k).map(|c| a.column(c).norm().max(1e-300)).collect();
    for (c, s) in scale.iter().enumerate() {
        a.column_mut(c).scale_mut(1.0 / s);
    }
    let b = DVector::from_column_slice(ys);
    let sol = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let coef: Vec<f64> = sol.iter().zip(&scale).map(|(x, s)| x / s).collect();
    coef.iter().all(|x| x.is_finite()).then_some(coef)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExactIid;

impl Sampler for ExactIid {
    fn method(&self) -> Method {
        Method::ExactIid
    }

    fn run_chain(&self, model: &Model, config: &SamplerConfig, chain: u32) -> Result<DrawSequence> {
        config.validate()?;
        let settings = &config.exact;
        if !model.prior.variance_priors_proper() {
            if !settings.check_propriety {
                return Err(Error::Usage(
                    "an improper variance prior requires the propriety check for exact sampling".into(),
                ));
            }
            let fit = fit_mode(model, &ModeConfig::default())?;
            let anchor = marginal_mode(model, &fit.state.variance)?;
            let report = propriety_smoke_test(model, &anchor)?;
            if !report.proper {
                let bad: Vec<String> = report
                    .rays
                    .iter()
                    .filter(|r| !r.passed)
                    .map(|r| r.instrument.to_string())
                    .collect();
                return Err(Error::Configuration(format!(
                    "posterior appears improper: variance marginal does not decay along instrument(s) {}",
                    bad.join(", ")
                )));
            }
        }

        let env = Envelope::build(model, settings)?;
        let mut rng = chain_rng(config.seed, chain);
        let wanted = config.kept();
        let mut log_k = env.log_k;
        let mut draws: Vec<ParameterState> = Vec::with_capacity(wanted);
        let mut proposals: u64 = 0;
        let mut accepted_total: u64 = 0;
        let mut restarts = 0usize;
        let mut max_excess = f64::NEG_INFINITY;
        while draws.len() < wanted {
            if proposals >= settings.max_proposals {
                let rate = accepted_total as f64 / proposals as f64;
                return Err(Error::Sampler(format!(
                    "exact sampler exceeded {} proposals with empirical acceptance rate {rate:.3e}",
                    settings.max_proposals
                )));
            }
            proposals += 1;
            let v = env.sample(&mut rng);
            let lr = env.log_ratio_or_neg_inf(model, &v);
            let u: f64 = rng.random();
            if !lr.is_finite() {
                continue;
            }
            max_excess = max_excess.max(lr - log_k);
            if lr > log_k {
                restarts += 1;
                if restarts > MAX_RESTARTS {
                    return Err(Error::Sampler(format!(
                        "rejection envelope was violated {restarts} times; use an MCMC method instead"
                    )));
                }
                log_k = lr + settings.margin;
                draws.clear();
                continue;
            }
            if u.ln() < lr - log_k {
                accepted_total += 1;
                let (b, g) = conditional_mean_draw(model, &v, &mut rng)?;
                draws.push(ParameterState::new(b, g, v)?);
            }
        }
        let mut stats = ChainStats {
            acceptance: Some(accepted_total as f64 / proposals as f64),
            proposals: Some(proposals),
            envelope_restarts: restarts,
            max_envelope_excess: max_excess.is_finite().then_some(max_excess),
            ..Default::default()
        };
        if restarts > 0 {
            stats
                .warnings
                .push(format!("rejection envelope raised {restarts} time(s) after violations"));
        }
        DrawSequence::new(Method::ExactIid, chain, config.seed, 0, draws, stats)
    }
}
