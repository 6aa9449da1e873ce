//! Hamiltonian Monte Carlo on `(B, G, w = log v)`.
//!
//! Fixed-length leapfrog trajectories with a Metropolis correction. During
//! warmup the step size is tuned by dual averaging toward the target
//! acceptance; the diagonal metric is estimated from the second half of warmup,
//! after which dual averaging restarts for the final quarter.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::{ChainStats, DrawSequence, Method, Model, ParameterState, V_MIN};
use crate::error::{Error, Result};
use crate::samplers::{chain_rng, initial_state, ChainRng, Sampler, SamplerConfig, TransitionKernel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const DIVERGENCE_NATS: f64 = 1000.0;

/// Log posterior in unconstrained coordinates, including the `Σ w_i` Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct UnconstrainedTarget<'a> {
    model: &'a Model,
}

impl<'a> UnconstrainedTarget<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model }
    }

    pub fn dim(&self) -> usize {
        2 * self.model.n_instruments() + self.model.n_sources()
    }

    pub fn to_unconstrained(&self, s: &ParameterState) -> Vec<f64> {
        s.log_area
            .iter()
            .chain(&s.log_flux)
            .copied()
            .chain(s.variance.iter().map(|v| v.ln()))
            .collect()
    }

    pub fn to_state(&self, x: &[f64]) -> ParameterState {
        let n = self.model.n_instruments();
        let m = self.model.n_sources();
        ParameterState {
            log_area: x[..n].to_vec(),
            log_flux: x[n..n + m].to_vec(),
            variance: x[n + m..].iter().map(|w| w.exp().max(V_MIN)).collect(),
        }
    }

    /// Log density at `x`; the gradient is written into `grad`.
    pub fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let model = self.model;
        let n = model.n_instruments();
        let m = model.n_sources();
        let (b, rest) = x.split_at(n);
        let (g, w) = rest.split_at(m);
        grad.iter_mut().for_each(|d| *d = 0.0);
        let mut lp = 0.0;
        let mut dv = vec![0.0; n];
        for e in model.data.entries() {
            let (i, j) = (e.instrument, e.source);
            let v = w[i].exp();
            let r = e.y - b[i] - g[j] + 0.5 * v;
            lp += -0.5 * (LN_2PI + w[i]) - r * r / (2.0 * v);
            grad[i] += r / v;
            grad[n + j] += r / v;
            dv[i] += -0.5 / v - r / (2.0 * v) + r * r / (2.0 * v * v);
        }
        for (i, p) in model.prior.instruments.iter().enumerate() {
            let v = w[i].exp();
            lp += p.log_area.log_density(b[i]) + p.variance.log_density(v) + w[i];
            grad[i] += p.log_area.d_log_density(b[i]);
            dv[i] += p.variance.d_log_density(v);
            grad[n + m + i] = dv[i] * v + 1.0;
        }
        for (j, p) in model.prior.sources.iter().enumerate() {
            lp += p.log_density(g[j]);
            grad[n + j] += p.d_log_density(g[j]);
        }
        lp
    }
}

struct Trajectory {
    position: Vec<f64>,
    log_density: f64,
    grad: Vec<f64>,
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

/// Integrates `steps` leapfrog steps; returns the end point and the
/// Hamiltonian change `H(end) - H(start)`.
fn leapfrog(
    target: &UnconstrainedTarget<'_>,
    start: &Trajectory,
    momentum: &mut [f64],
    eps: f64,
    steps: usize,
    inv_mass: &[f64],
) -> (Trajectory, f64) {
    let h0 = -start.log_density + kinetic(momentum, inv_mass);
    let mut x = start.position.clone();
    let mut grad = start.grad.clone();
    let mut lp = start.log_density;
    if steps == 0 {
        return (
            Trajectory {
                position: x,
                log_density: lp,
                grad,
            },
            0.0,
        );
    }
    for (p, g) in momentum.iter_mut().zip(&grad) {
        *p += 0.5 * eps * g;
    }
    for step in 0..steps {
        for ((xk, p), mi) in x.iter_mut().zip(momentum.iter()).zip(inv_mass) {
            *xk += eps * mi * p;
        }
        lp = target.eval(&x, &mut grad);
        if !lp.is_finite() {
            break;
        }
        let scale = if step + 1 == steps { 0.5 } else { 1.0 };
        for (p, g) in momentum.iter_mut().zip(&grad) {
            *p += scale * eps * g;
        }
    }
    let h1 = -lp + kinetic(momentum, inv_mass);
    let dh = if h1.is_finite() { h1 - h0 } else { f64::INFINITY };
    (
        Trajectory {
            position: x,
            log_density: lp,
            grad,
        },
        dh,
    )
}

/// Energy error `H(end) - H(start)` of one leapfrog trajectory with unit metric.
pub fn leapfrog_energy_error(
    model: &Model,
    state: &ParameterState,
    momentum: &[f64],
    step_size: f64,
    steps: usize,
) -> f64 {
    let target = UnconstrainedTarget::new(model);
    let x = target.to_unconstrained(state);
    let mut grad = vec![0.0; x.len()];
    let lp = target.eval(&x, &mut grad);
    let start = Trajectory {
        position: x,
        log_density: lp,
        grad,
    };
    let mut p = momentum.to_vec();
    let ones = vec![1.0; p.len()];
    leapfrog(&target, &start, &mut p, step_size, steps, &ones).1
}

struct TransitionOutcome {
    accept_prob: f64,
    divergent: bool,
}

fn hmc_transition(
    target: &UnconstrainedTarget<'_>,
    current: &mut Trajectory,
    eps: f64,
    steps: usize,
    inv_mass: &[f64],
    rng: &mut ChainRng,
) -> TransitionOutcome {
    let mut p: Vec<f64> = inv_mass
        .iter()
        .map(|mi| {
            let z: f64 = rng.sample(StandardNormal);
            z / mi.sqrt()
        })
        .collect();
    let (prop, dh) = leapfrog(target, current, &mut p, eps, steps, inv_mass);
    let divergent = !(dh < DIVERGENCE_NATS);
    let accept_prob = if dh.is_finite() { (-dh).exp().min(1.0) } else { 0.0 };
    let u: f64 = rng.random();
    if u < accept_prob {
        *current = prop;
    }
    TransitionOutcome {
        accept_prob,
        divergent,
    }
}

/// HMC transition with a fixed step size and metric.
#[derive(Debug, Clone)]
pub struct HmcKernel {
    pub step_size: f64,
    pub steps: usize,
    /// Diagonal inverse metric; empty means unit.
    pub inv_mass: Vec<f64>,
    pub last_accept_prob: f64,
}

impl HmcKernel {
    pub fn new(step_size: f64, steps: usize) -> Self {
        Self {
            step_size,
            steps,
            inv_mass: Vec::new(),
            last_accept_prob: 1.0,
        }
    }
}

impl TransitionKernel for HmcKernel {
    fn transition(
        &mut self,
        model: &Model,
        state: &mut ParameterState,
        rng: &mut ChainRng,
    ) -> Result<()> {
        let target = UnconstrainedTarget::new(model);
        if self.inv_mass.len() != target.dim() {
            self.inv_mass = vec![1.0; target.dim()];
        }
        let x = target.to_unconstrained(state);
        let mut grad = vec![0.0; x.len()];
        let lp = target.eval(&x, &mut grad);
        let mut cur = Trajectory {
            position: x,
            log_density: lp,
            grad,
        };
        let out = hmc_transition(&target, &mut cur, self.step_size, self.steps, &self.inv_mass, rng);
        self.last_accept_prob = out.accept_prob;
        *state = target.to_state(&cur.position);
        Ok(())
    }
}

/// Nesterov dual averaging of `log ε`.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

fn reasonable_step_size(
    target: &UnconstrainedTarget<'_>,
    start: &Trajectory,
    inv_mass: &[f64],
    rng: &mut ChainRng,
) -> f64 {
    let mut eps: f64 = 0.1;
    let accept = |eps: f64, rng: &mut ChainRng| {
        let mut p: Vec<f64> = inv_mass
            .iter()
            .map(|mi| {
                let z: f64 = rng.sample(StandardNormal);
                z / mi.sqrt()
            })
            .collect();
        let (_, dh) = leapfrog(target, start, &mut p, eps, 1, inv_mass);
        if dh.is_finite() {
            (-dh).exp().min(1.0)
        } else {
            0.0
        }
    };
    let first = accept(eps, rng);
    let dir = if first > 0.5 { 1.0 } else { -1.0 };
    for _ in 0..50 {
        let a = accept(eps, rng);
        if dir > 0.0 && a <= 0.5 || dir < 0.0 && a > 0.5 {
            break;
        }
        eps *= 2f64.powf(dir);
    }
    eps.clamp(1e-6, 10.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Hmc;

impl Sampler for Hmc {
    fn method(&self) -> Method {
        Method::Hmc
    }

    fn run_chain(&self, model: &Model, config: &SamplerConfig, chain: u32) -> Result<DrawSequence> {
        config.validate()?;
        let settings = config.hmc;
        let mut rng = chain_rng(config.seed, chain);
        let target = UnconstrainedTarget::new(model);
        let init = initial_state(model, &mut rng)?;
        let x = target.to_unconstrained(&init);
        let mut grad = vec![0.0; x.len()];
        let lp = target.eval(&x, &mut grad);
        if !lp.is_finite() {
            return Err(Error::Sampler("HMC start point has non-finite log density".into()));
        }
        let mut cur = Trajectory {
            position: x,
            log_density: lp,
            grad,
        };
        let d = target.dim();
        let mut inv_mass = vec![1.0; d];
        let steps = settings.leapfrog_steps;
        let warmup = config.warmup;
        let adapt = settings.step_size.is_none() && warmup > 0;

        let mut eps = match settings.step_size {
            Some(e) => e,
            None => reasonable_step_size(&target, &cur, &inv_mass, &mut rng),
        };
        let mut da = DualAveraging::new(eps, settings.target_accept);
        let metric_start = warmup / 2;
        let metric_end = (3 * warmup) / 4;
        let mut welford = Welford::new(d);

        let mut draws = Vec::with_capacity(config.kept());
        let mut accept_sum = 0.0;
        let mut divergences = 0usize;
        for it in 0..config.iterations {
            let step = if it < warmup {
                eps
            } else {
                let u: f64 = rng.random();
                eps * (1.0 + settings.jitter * (2.0 * u - 1.0))
            };
            let out = hmc_transition(&target, &mut cur, step, steps, &inv_mass, &mut rng);
            if it < warmup {
                if adapt {
                    da.update(out.accept_prob);
                    eps = da.current();
                    if it >= metric_start && it < metric_end {
                        welford.push(&cur.position);
                    }
                    if it + 1 == metric_end && welford.count >= 10 {
                        inv_mass = welford.regularized_variance();
                        eps = reasonable_step_size(&target, &cur, &inv_mass, &mut rng);
                        da = DualAveraging::new(eps, settings.target_accept);
                    }
                    if it + 1 == warmup {
                        eps = da.final_step();
                    }
                }
            } else {
                accept_sum += out.accept_prob;
                if out.divergent {
                    divergences += 1;
                }
                draws.push(target.to_state(&cur.position));
            }
        }
        let kept = config.kept();
        let mut stats = ChainStats {
            acceptance: Some(accept_sum / kept as f64),
            divergences,
            step_size: Some(eps),
            ..Default::default()
        };
        if divergences as f64 > 0.01 * kept as f64 {
            stats.warnings.push(format!(
                "{divergences} divergent transitions out of {kept} post-warmup iterations"
            ));
        }
        DrawSequence::new(Method::Hmc, chain, config.seed, warmup, draws, stats)
    }
}

struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for k in 0..x.len() {
            let delta = x[k] - self.mean[k];
            self.mean[k] += delta / n;
            self.m2[k] += delta * (x[k] - self.mean[k]);
        }
    }

    /// Sample variance shrunk toward 1e-3, as in Stan's windowed adaptation.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}
