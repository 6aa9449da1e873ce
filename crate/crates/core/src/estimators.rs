//! Shrinkage variance estimation, the conditional-maximization mode finder and
//! the ratio-estimator baseline.

use serde::{Deserialize, Serialize};

use crate::domain::{
    log_likelihood, LogScaleData, Model, ObservationTable, ParameterState, VariancePrior, V_MIN,
};
use crate::error::{Error, Result};
use crate::twoway::MeanSystem;

/// Self-weighted shrinkage factor `R = 2 / (1 + sqrt(1 + S²))`.
pub fn shrinkage_factor(s2: f64) -> Result<f64> {
    if !(s2 >= 0.0) {
        return Err(Error::Domain(format!("S² must be nonnegative, got {s2}")));
    }
    Ok(2.0 / (1.0 + (1.0 + s2).sqrt()))
}

/// Penalty applied to a variance parameter during mode finding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VariancePenalty {
    /// No variance prior: the plain HVC likelihood.
    Flat,
    Prior(VariancePrior),
}

/// Result of one variance update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceUpdate {
    pub value: f64,
    pub at_floor: bool,
}

/// Maximizes the conditional log density of one instrument's variance given
/// the HVC-free residuals `r = y - B - G`.
///
/// With a flat penalty the maximizer is the shrinkage form `R(S²)·S²` with
/// `S² = Σr²/n`. With an inverse-gamma (or 1/v) prior the derivative of the
/// conditional log density is bracketed on `[V_MIN, S² + 4β + 4]` and its root
/// found by safeguarded Newton/bisection.
pub fn update_variance(residuals: &[f64], penalty: VariancePenalty) -> Result<VarianceUpdate> {
    if residuals.is_empty() {
        return Err(Error::Usage("variance update needs at least one residual".into()));
    }
    let n = residuals.len() as f64;
    let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / n;
    let v = match penalty {
        VariancePenalty::Flat => shrinkage_factor(s2)? * s2,
        VariancePenalty::Prior(p) => {
            let (a, b) = p.shape_scale();
            // v² · d/dv of the conditional log density; concave quadratic, positive at 0.
            let h = |v: f64| -(n / 2.0 + a + 1.0) * v + (n * s2 + 2.0 * b) / 2.0 - n * v * v / 8.0;
            let dh = |v: f64| -(n / 2.0 + a + 1.0) - n * v / 4.0;
            let mut lo = V_MIN;
            let mut hi = s2 + 4.0 * b + 4.0;
            if h(lo) <= 0.0 {
                lo
            } else {
                let mut x = 0.5 * (lo + hi);
                for _ in 0..200 {
                    let fx = h(x);
                    if fx > 0.0 {
                        lo = x;
                    } else {
                        hi = x;
                    }
                    let newton = x - fx / dh(x);
                    let next = if newton > lo && newton < hi {
                        newton
                    } else {
                        0.5 * (lo + hi)
                    };
                    if (next - x).abs() <= 1e-16 * x.max(V_MIN) || hi - lo <= 1e-16 * hi {
                        x = next;
                        break;
                    }
                    x = next;
                }
                x
            }
        }
    };
    if v <= V_MIN {
        Ok(VarianceUpdate {
            value: V_MIN,
            at_floor: true,
        })
    } else {
        Ok(VarianceUpdate {
            value: v,
            at_floor: false,
        })
    }
}

/// Mode of the Gaussian `(B, G) | v` block.
pub fn update_means(model: &Model, variance: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let sys = MeanSystem::new(model, variance)?;
    let (b, g) = sys.mean();
    Ok((b.to_vec(), g.to_vec()))
}

/// HVC-free residuals `y - B - G` for instrument `i`.
pub fn instrument_residuals(data: &LogScaleData, state: &ParameterState, i: usize) -> Vec<f64> {
    data.instrument_entries(i)
        .iter()
        .map(|&k| {
            let e = &data.entries()[k];
            e.y - state.log_area[i] - state.log_flux[e.source]
        })
        .collect()
}

/// Objective maximized by [`fit_mode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FitTarget {
    /// The full log posterior (posterior mode).
    #[default]
    Posterior,
    /// Log likelihood plus the mean priors only: the variance prior is dropped,
    /// so each variance update is the shrinkage form `R·S²`.
    Likelihood,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    pub target: FitTarget,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iters: 500,
            target: FitTarget::Posterior,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeFitResult {
    pub state: ParameterState,
    pub iterations: usize,
    pub converged: bool,
    /// Max absolute change over `(B, G, log v)` in the last sweep.
    pub max_update: f64,
    /// Per instrument: variance pinned at the floor.
    pub boundary: Vec<bool>,
    /// Objective after each sweep.
    pub objective_trace: Vec<f64>,
}

/// Value of the objective that [`fit_mode`] climbs.
pub fn mode_objective(model: &Model, state: &ParameterState, target: FitTarget) -> f64 {
    match target {
        FitTarget::Posterior => model.log_posterior(state),
        FitTarget::Likelihood => {
            let ll = log_likelihood(state, &model.data).expect("consistent dimensions");
            let mean_prior: f64 = model
                .prior
                .instruments
                .iter()
                .zip(&state.log_area)
                .map(|(p, &b)| p.log_area.log_density(b))
                .chain(
                    model
                        .prior
                        .sources
                        .iter()
                        .zip(&state.log_flux)
                        .map(|(p, &g)| p.log_density(g)),
                )
                .sum();
            ll + mean_prior
        }
    }
}

/// Cyclic conditional maximization: joint `(B, G)` update given `v`, then every
/// `v_i` given `(B, G)`, until the largest coordinate change drops below the tolerance.
pub fn fit_mode(model: &Model, config: &ModeConfig) -> Result<ModeFitResult> {
    let n = model.n_instruments();
    // Equal tiny variances: the first mean update is the equally weighted fit.
    let mut variance = vec![V_MIN; n];
    let mut state: Option<ParameterState> = None;
    let mut boundary = vec![false; n];
    let mut trace = Vec::new();
    let mut max_update = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iters {
        iterations += 1;
        let (b, g) = update_means(model, &variance)?;
        let mut next = ParameterState {
            log_area: b,
            log_flux: g,
            variance: variance.clone(),
        };
        for i in 0..n {
            let r = instrument_residuals(&model.data, &next, i);
            let penalty = match config.target {
                FitTarget::Posterior => VariancePenalty::Prior(model.prior.instruments[i].variance),
                FitTarget::Likelihood => VariancePenalty::Flat,
            };
            let u = update_variance(&r, penalty)?;
            next.variance[i] = u.value;
            boundary[i] = u.at_floor;
        }
        max_update = match &state {
            Some(prev) => coordinate_change(prev, &next),
            None => f64::INFINITY,
        };
        let obj = mode_objective(model, &next, config.target);
        if let Some(&last) = trace.last() {
            debug_assert!(
                obj >= last - 1e-9 * (1.0 + f64::abs(last)),
                "objective decreased: {last} -> {obj}"
            );
        }
        trace.push(obj);
        variance = next.variance.clone();
        state = Some(next);
        if max_update < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(ModeFitResult {
        state: state.expect("at least one sweep"),
        iterations,
        converged,
        max_update,
        boundary,
        objective_trace: trace,
    })
}

fn coordinate_change(a: &ParameterState, b: &ParameterState) -> f64 {
    let means = a
        .log_area
        .iter()
        .zip(&b.log_area)
        .chain(a.log_flux.iter().zip(&b.log_flux))
        .map(|(x, y)| (x - y).abs());
    let vars = a
        .variance
        .iter()
        .zip(&b.variance)
        .map(|(x, y)| (x.ln() - y.ln()).abs());
    means.chain(vars).fold(0.0, f64::max)
}

/// How per-instrument ratio estimates are combined for one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatioCombine {
    #[default]
    Geometric,
    Arithmetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimates {
    /// `(instrument, source, c / (T a))` per entry.
    pub raw: Vec<(usize, usize, f64)>,
    /// Combined flux estimate per source.
    pub combined: Vec<f64>,
}

/// Ratio-estimator baseline `f_j^(i) = c_ij / (T_ij a_i)` combined over instruments.
pub fn ratio_estimates(
    table: &ObservationTable,
    areas: &[f64],
    combine: RatioCombine,
) -> Result<RatioEstimates> {
    if areas.len() != table.n_instruments() {
        return Err(Error::Usage(format!(
            "expected {} area estimates, got {}",
            table.n_instruments(),
            areas.len()
        )));
    }
    if let Some(a) = areas.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::Domain(format!("area estimates must be positive, got {a}")));
    }
    let raw: Vec<(usize, usize, f64)> = table
        .entries()
        .iter()
        .map(|e| {
            (
                e.instrument,
                e.source,
                e.count / (e.adjustment * areas[e.instrument]),
            )
        })
        .collect();
    let m = table.n_sources();
    let mut acc = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for &(_, j, f) in &raw {
        acc[j] += match combine {
            RatioCombine::Geometric => f.ln(),
            RatioCombine::Arithmetic => f,
        };
        counts[j] += 1;
    }
    let combined = acc
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            let mean = s / c as f64;
            match combine {
                RatioCombine::Geometric => mean.exp(),
                RatioCombine::Arithmetic => mean,
            }
        })
        .collect();
    Ok(RatioEstimates { raw, combined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CalibrationPrior, Entry, InstrumentPrior, NormalPrior};
    use approx::assert_relative_eq;

    #[test]
    fn shrinkage_values() {
        assert_eq!(shrinkage_factor(0.0).unwrap(), 1.0);
        assert_relative_eq!(shrinkage_factor(3.0).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(shrinkage_factor(8.0).unwrap(), 0.5, epsilon = 1e-15);
        assert!(matches!(shrinkage_factor(-1e-3), Err(Error::Domain(_))));
        assert!(shrinkage_factor(f64::NAN).is_err());
    }

    /// Brute-force maximizer of ℓ(v) = -(n/2) log v - nS²/(2v) - nv/8 (n cancels).
    fn profile_argmax(s2: f64) -> f64 {
        let l = |v: f64| -0.5 * v.ln() - s2 / (2.0 * v) - v / 8.0;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 1..=20_000 {
            let v = k as f64 * 1e-3;
            if l(v) > best.0 {
                best = (l(v), v);
            }
        }
        // Golden-section refinement on [v - h, v + h].
        let (mut a, mut b) = (best.1 - 1e-3, best.1 + 1e-3);
        let gr = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let c = b - gr * (b - a);
            let d = a + gr * (b - a);
            if l(c) > l(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn flat_variance_examples() {
        let zero = update_variance(&[0.0, 0.0, 0.0], VariancePenalty::Flat).unwrap();
        assert_eq!(zero.value, V_MIN);
        assert!(zero.at_floor);
        // S² = 3 and S² = 8 from residuals ±sqrt(S²).
        for (s2, expect) in [(3.0f64, 2.0), (8.0, 4.0)] {
            let r = [s2.sqrt(), -s2.sqrt()];
            let u = update_variance(&r, VariancePenalty::Flat).unwrap();
            assert_relative_eq!(u.value, expect, epsilon = 1e-12);
            assert_relative_eq!(profile_argmax(s2), expect, epsilon = 1e-6);
        }
        assert!(matches!(
            update_variance(&[], VariancePenalty::Flat),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn inverse_gamma_update_solves_quadratic() {
        let r = [0.3, -0.1, 0.25, 0.05];
        let (a, b) = (2.0, 0.1);
        let u = update_variance(&r, VariancePenalty::Prior(VariancePrior::InverseGamma { shape: a, scale: b }))
            .unwrap();
        let n = r.len() as f64;
        let s2 = r.iter().map(|x| x * x).sum::<f64>() / n;
        // n v² + (4n + 8a + 8) v - 4(nS² + 2b) = 0
        let qb = 4.0 * n + 8.0 * a + 8.0;
        let root = (-qb + (qb * qb + 16.0 * n * (n * s2 + 2.0 * b)).sqrt()) / (2.0 * n);
        assert_relative_eq!(u.value, root, max_relative = 1e-13);
    }

    fn small_model(tau: f64) -> Model {
        let cells = [(0, 0, 1.0)];
        let data = LogScaleData::from_cells(1, 1, cells).unwrap();
        let prior = CalibrationPrior::new(vec![InstrumentPrior::from_estimate(1.0, tau)], 1);
        Model::new(data, prior).unwrap()
    }

    #[test]
    fn one_by_one_means() {
        // Flat G absorbs the datum: G = ỹ - B with B at the prior location.
        let m = small_model(0.5);
        let (b, g) = update_means(&m, &[0.4]).unwrap();
        assert_relative_eq!(b[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(g[0], 1.0 + 0.2 - b[0], epsilon = 1e-14);
    }

    #[test]
    fn noiseless_means_fixed_point() {
        let b_true = [0.3, -0.2, 0.1];
        let g_true = [1.0, 0.5, 2.0, -1.0];
        let v = [0.1, 0.2, 0.05];
        let cells: Vec<_> = (0..3)
            .flat_map(|i| (0..4).map(move |j| (i, j, b_true[i] + g_true[j] - v[i] / 2.0)))
            .collect();
        let data = LogScaleData::from_cells(3, 4, cells).unwrap();
        let prior = CalibrationPrior::new(
            b_true
                .iter()
                .map(|&b| InstrumentPrior { log_area: NormalPrior::new(b, 0.2), ..InstrumentPrior::from_estimate(1.0, 1.0) })
                .collect(),
            4,
        );
        let m = Model::new(data, prior).unwrap();
        let (b, g) = update_means(&m, &v).unwrap();
        for (x, t) in b.iter().chain(&g).zip(b_true.iter().chain(&g_true)) {
            assert_relative_eq!(x, t, epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_fit_converges_to_floor() {
        let b_true = [0.3, -0.2];
        let g_true = [1.0, 0.5, 2.0];
        let cells: Vec<_> = (0..2)
            .flat_map(|i| (0..3).map(move |j| (i, j, b_true[i] + g_true[j])))
            .collect();
        let data = LogScaleData::from_cells(2, 3, cells).unwrap();
        let prior = CalibrationPrior::new(
            b_true
                .iter()
                .map(|&b| InstrumentPrior { log_area: NormalPrior::new(b, 0.2), ..InstrumentPrior::from_estimate(1.0, 1.0) })
                .collect(),
            3,
        );
        let m = Model::new(data, prior).unwrap();
        let cfg = ModeConfig { target: FitTarget::Likelihood, ..ModeConfig::default() };
        let fit = fit_mode(&m, &cfg).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2, "{} sweeps", fit.iterations);
        assert!(fit.boundary.iter().all(|&f| f));
        for (x, t) in fit.state.log_area.iter().chain(&fit.state.log_flux).zip(b_true.iter().chain(&g_true)) {
            assert_relative_eq!(x, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn max_iters_reports_not_converged() {
        let m = small_model(0.5);
        let fit = fit_mode(&m, &ModeConfig { max_iters: 1, ..ModeConfig::default() }).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
    }

    fn tbl(cells: &[(usize, usize, f64, f64)], n: usize, m: usize) -> ObservationTable {
        ObservationTable::new(
            n,
            m,
            cells
                .iter()
                .map(|&(i, j, c, t)| Entry { instrument: i, source: j, count: c, adjustment: t })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ratio_examples() {
        let (a, f, t) = ([2.0, 0.5], [10.0, 3.0], [[1.0, 2.0], [4.0, 1.5]]);
        let cells: Vec<_> = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j, t[i][j] * a[i] * f[j], t[i][j])))
            .collect();
        let r = ratio_estimates(&tbl(&cells, 2, 2), &a, RatioCombine::Geometric).unwrap();
        for (x, y) in r.combined.iter().zip(&f) {
            assert_relative_eq!(x, y, max_relative = 1e-14);
        }
        let two = tbl(&[(0, 0, 2.0, 1.0), (1, 0, 8.0, 1.0)], 2, 1);
        let r = ratio_estimates(&two, &[1.0, 1.0], RatioCombine::Geometric).unwrap();
        assert_relative_eq!(r.combined[0], 4.0, max_relative = 1e-14);
        let r = ratio_estimates(&two, &[1.0, 1.0], RatioCombine::Arithmetic).unwrap();
        assert_relative_eq!(r.combined[0], 5.0, max_relative = 1e-14);
        assert!(ratio_estimates(&two, &[1.0, 0.0], RatioCombine::Geometric).is_err());
    }
}
