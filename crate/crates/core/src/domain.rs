//! Data and parameter types, the log transform, the half-variance-corrected
//! mean map, and the likelihood / posterior evaluators.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Floor applied to every variance parameter.
pub const V_MIN: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One measured cell of the instrument × source table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub instrument: usize,
    pub source: usize,
    /// Observed count; may be non-integer after preprocessing.
    pub count: f64,
    /// Known multiplicative adjustment (exposure, pileup correction, ...).
    pub adjustment: f64,
}

/// Observed counts and adjustments over an incidence set.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    n_instruments: usize,
    n_sources: usize,
    entries: Vec<Entry>,
}

impl ObservationTable {
    pub fn new(n_instruments: usize, n_sources: usize, entries: Vec<Entry>) -> Result<Self> {
        validate_incidence(
            n_instruments,
            n_sources,
            entries.iter().map(|e| (e.instrument, e.source)),
        )?;
        for (k, e) in entries.iter().enumerate() {
            if !(e.count > 0.0 && e.count.is_finite()) {
                return Err(Error::Domain(format!(
                    "entry {k}: count must be positive and finite, got {}",
                    e.count
                )));
            }
            if !(e.adjustment > 0.0 && e.adjustment.is_finite()) {
                return Err(Error::Domain(format!(
                    "entry {k}: adjustment must be positive and finite, got {}",
                    e.adjustment
                )));
            }
        }
        Ok(Self {
            n_instruments,
            n_sources,
            entries,
        })
    }

    pub fn n_instruments(&self) -> usize {
        self.n_instruments
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }
}

fn validate_incidence(
    n_instruments: usize,
    n_sources: usize,
    cells: impl Iterator<Item = (usize, usize)>,
) -> Result<()> {
    if n_instruments == 0 || n_sources == 0 {
        return Err(Error::Usage(
            "need at least one instrument and one source".into(),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    let mut inst_seen = vec![false; n_instruments];
    let mut src_seen = vec![false; n_sources];
    for (i, j) in cells {
        if i >= n_instruments || j >= n_sources {
            return Err(Error::Usage(format!(
                "cell ({i}, {j}) outside a {n_instruments} x {n_sources} table"
            )));
        }
        if !seen.insert((i, j)) {
            return Err(Error::Usage(format!("duplicate cell ({i}, {j})")));
        }
        inst_seen[i] = true;
        src_seen[j] = true;
    }
    if let Some(i) = inst_seen.iter().position(|s| !s) {
        return Err(Error::Usage(format!("instrument {i} has no entries")));
    }
    if let Some(j) = src_seen.iter().position(|s| !s) {
        return Err(Error::Usage(format!("source {j} has no entries")));
    }
    Ok(())
}

/// Log-scale observation `y = log c - log T` for one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub instrument: usize,
    pub source: usize,
    pub y: f64,
}

/// The log-scale observable with per-instrument and per-source entry indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LogScaleData {
    n_instruments: usize,
    n_sources: usize,
    entries: Vec<LogEntry>,
    by_instrument: Vec<Vec<usize>>,
    by_source: Vec<Vec<usize>>,
}

impl LogScaleData {
    /// Builds log-scale data directly from `(instrument, source, y)` cells.
    pub fn from_cells(
        n_instruments: usize,
        n_sources: usize,
        cells: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let entries: Vec<LogEntry> = cells
            .into_iter()
            .map(|(instrument, source, y)| LogEntry {
                instrument,
                source,
                y,
            })
            .collect();
        validate_incidence(
            n_instruments,
            n_sources,
            entries.iter().map(|e| (e.instrument, e.source)),
        )?;
        if let Some(e) = entries.iter().find(|e| !e.y.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite log observation at ({}, {})",
                e.instrument, e.source
            )));
        }
        let mut by_instrument = vec![Vec::new(); n_instruments];
        let mut by_source = vec![Vec::new(); n_sources];
        for (k, e) in entries.iter().enumerate() {
            by_instrument[e.instrument].push(k);
            by_source[e.source].push(k);
        }
        Ok(Self {
            n_instruments,
            n_sources,
            entries,
            by_instrument,
            by_source,
        })
    }

    /// Same incidence structure with new observation values (one per entry, in entry order).
    pub fn with_values(&self, ys: &[f64]) -> Result<Self> {
        if ys.len() != self.entries.len() {
            return Err(Error::Usage(format!(
                "expected {} values, got {}",
                self.entries.len(),
                ys.len()
            )));
        }
        let mut out = self.clone();
        for (e, &y) in out.entries.iter_mut().zip(ys) {
            e.y = y;
        }
        Ok(out)
    }

    pub fn n_instruments(&self) -> usize {
        self.n_instruments
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Entry indices observed by instrument `i`.
    pub fn instrument_entries(&self, i: usize) -> &[usize] {
        &self.by_instrument[i]
    }

    /// Entry indices observing source `j`.
    pub fn source_entries(&self, j: usize) -> &[usize] {
        &self.by_source[j]
    }

    /// Number of entries `n_i` for instrument `i`.
    pub fn instrument_count(&self, i: usize) -> usize {
        self.by_instrument[i].len()
    }

    /// True if every instrument observes every source.
    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.n_instruments * self.n_sources
    }
}

/// `y_ij = log c_ij - log T_ij` for every entry.
pub fn log_transform(table: &ObservationTable) -> LogScaleData {
    let cells = table
        .entries()
        .iter()
        .map(|e| (e.instrument, e.source, e.count.ln() - e.adjustment.ln()));
    LogScaleData::from_cells(table.n_instruments(), table.n_sources(), cells)
        .expect("a validated observation table yields valid log-scale data")
}

/// Log-scale mean with the half-variance correction: `B + G - v/2`.
#[inline]
pub fn hvc_mean(log_area: f64, log_flux: f64, variance: f64) -> f64 {
    log_area + log_flux - 0.5 * variance
}

/// Natural-scale expected count `T · A · F`.
pub fn expected_count(adjustment: f64, area: f64, flux: f64) -> Result<f64> {
    if !(adjustment > 0.0 && area > 0.0 && flux > 0.0) {
        return Err(Error::Domain(format!(
            "expected_count needs positive inputs, got T={adjustment}, A={area}, F={flux}"
        )));
    }
    Ok(adjustment * area * flux)
}

/// Normal prior with location and spread; an infinite spread is a flat prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub location: f64,
    pub spread: f64,
}

impl NormalPrior {
    pub fn new(location: f64, spread: f64) -> Self {
        Self { location, spread }
    }

    pub fn flat() -> Self {
        Self {
            location: 0.0,
            spread: f64::INFINITY,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.spread.is_infinite()
    }

    /// Precision `1/spread²`, zero for a flat prior.
    pub fn precision(&self) -> f64 {
        if self.is_flat() {
            0.0
        } else {
            1.0 / (self.spread * self.spread)
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if self.is_flat() {
            return 0.0;
        }
        let z = (x - self.location) / self.spread;
        -0.5 * z * z - self.spread.ln() - 0.5 * LN_2PI
    }

    pub fn d_log_density(&self, x: f64) -> f64 {
        -(x - self.location) * self.precision()
    }
}

/// Prior on one variance parameter `v_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VariancePrior {
    /// Inverse-gamma with shape α and scale β: density ∝ v^(-α-1) exp(-β/v).
    InverseGamma { shape: f64, scale: f64 },
    /// The improper density 1/v.
    Improper,
}

impl VariancePrior {
    pub const DEFAULT: VariancePrior = VariancePrior::InverseGamma {
        shape: 2.0,
        scale: 0.1,
    };

    pub fn is_proper(&self) -> bool {
        matches!(self, VariancePrior::InverseGamma { .. })
    }

    /// `(α, β)`, with the improper prior read as `(0, 0)`.
    pub fn shape_scale(&self) -> (f64, f64) {
        match *self {
            VariancePrior::InverseGamma { shape, scale } => (shape, scale),
            VariancePrior::Improper => (0.0, 0.0),
        }
    }

    pub fn log_density(&self, v: f64) -> f64 {
        match *self {
            VariancePrior::InverseGamma { shape, scale } => {
                shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * v.ln() - scale / v
            }
            VariancePrior::Improper => -v.ln(),
        }
    }

    pub fn d_log_density(&self, v: f64) -> f64 {
        let (a, b) = self.shape_scale();
        -(a + 1.0) / v + b / (v * v)
    }
}

/// Prior for one instrument: location/spread on `B_i` and the variance prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentPrior {
    pub log_area: NormalPrior,
    pub variance: VariancePrior,
}

impl InstrumentPrior {
    /// Prior centred at `log a` with spread `tau` and the default inverse-gamma(2, 0.1) variance prior.
    pub fn from_estimate(a: f64, tau: f64) -> Self {
        Self {
            log_area: NormalPrior::new(a.ln(), tau),
            variance: VariancePrior::DEFAULT,
        }
    }
}

/// Per-instrument calibration prior plus the (default flat) source priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPrior {
    pub instruments: Vec<InstrumentPrior>,
    pub sources: Vec<NormalPrior>,
}

impl CalibrationPrior {
    /// Flat priors on every `G_j`.
    pub fn new(instruments: Vec<InstrumentPrior>, n_sources: usize) -> Self {
        Self {
            instruments,
            sources: vec![NormalPrior::flat(); n_sources],
        }
    }

    pub fn with_source_priors(mut self, sources: Vec<NormalPrior>) -> Self {
        self.sources = sources;
        self
    }

    /// Replaces every variance prior.
    pub fn with_variance_prior(mut self, prior: VariancePrior) -> Self {
        for p in &mut self.instruments {
            p.variance = prior;
        }
        self
    }

    pub fn n_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn variance_priors_proper(&self) -> bool {
        self.instruments.iter().all(|p| p.variance.is_proper())
    }

    fn validate(&self) -> Result<()> {
        if !self.instruments.iter().any(|p| !p.log_area.is_flat()) {
            return Err(Error::Configuration(
                "at least one instrument needs a finite prior spread tau; \
                 otherwise areas and fluxes trade off freely"
                    .into(),
            ));
        }
        for (i, p) in self.instruments.iter().enumerate() {
            if !(p.log_area.spread > 0.0) || !p.log_area.location.is_finite() {
                return Err(Error::Configuration(format!(
                    "instrument {i}: prior needs finite location and positive spread"
                )));
            }
            if let VariancePrior::InverseGamma { shape, scale } = p.variance {
                if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                    return Err(Error::Configuration(format!(
                        "instrument {i}: inverse-gamma shape and scale must be positive"
                    )));
                }
            }
        }
        for (j, p) in self.sources.iter().enumerate() {
            if !(p.spread > 0.0) || !p.location.is_finite() {
                return Err(Error::Configuration(format!(
                    "source {j}: prior needs finite location and positive spread"
                )));
            }
        }
        Ok(())
    }
}

/// One point `(B, G, v)` of parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    /// `B_i = log A_i`.
    pub log_area: Vec<f64>,
    /// `G_j = log F_j`.
    pub log_flux: Vec<f64>,
    /// `v_i = σ_i²`.
    pub variance: Vec<f64>,
}

impl ParameterState {
    pub fn new(log_area: Vec<f64>, log_flux: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        let s = Self {
            log_area,
            log_flux,
            variance,
        };
        s.check()?;
        Ok(s)
    }

    /// Checks the variance floor and finiteness.
    pub fn check(&self) -> Result<()> {
        if self.log_area.len() != self.variance.len() {
            return Err(Error::Usage(
                "log_area and variance lengths differ".into(),
            ));
        }
        if let Some(v) = self.variance.iter().find(|&&v| !(v >= V_MIN) || !v.is_finite()) {
            return Err(Error::Domain(format!("variance {v} below floor {V_MIN}")));
        }
        if self
            .log_area
            .iter()
            .chain(&self.log_flux)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Domain("non-finite mean parameter".into()));
        }
        Ok(())
    }

    pub fn n_instruments(&self) -> usize {
        self.log_area.len()
    }

    pub fn n_sources(&self) -> usize {
        self.log_flux.len()
    }

    /// Flattened `(B, G, v)`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.log_area
            .iter()
            .chain(&self.log_flux)
            .chain(&self.variance)
            .copied()
            .collect()
    }

    fn check_dims(&self, data: &LogScaleData) -> Result<()> {
        if self.log_area.len() != data.n_instruments()
            || self.variance.len() != data.n_instruments()
            || self.log_flux.len() != data.n_sources()
        {
            return Err(Error::Usage(format!(
                "state has {}/{}/{} parameters, data is {} x {}",
                self.log_area.len(),
                self.log_flux.len(),
                self.variance.len(),
                data.n_instruments(),
                data.n_sources()
            )));
        }
        Ok(())
    }
}

/// Gradient of the log posterior with respect to `(B, G, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub log_area: Vec<f64>,
    pub log_flux: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Sum over entries of the Normal(hvc_mean, v_i) log-density at `y_ij`.
pub fn log_likelihood(state: &ParameterState, data: &LogScaleData) -> Result<f64> {
    state.check_dims(data)?;
    Ok(data
        .entries()
        .iter()
        .map(|e| entry_log_density(state, e))
        .sum())
}

#[inline]
pub(crate) fn entry_log_density(state: &ParameterState, e: &LogEntry) -> f64 {
    let v = state.variance[e.instrument];
    let r = e.y - hvc_mean(state.log_area[e.instrument], state.log_flux[e.source], v);
    -0.5 * (LN_2PI + v.ln()) - r * r / (2.0 * v)
}

fn check_prior_dims(prior: &CalibrationPrior, data: &LogScaleData) -> Result<()> {
    if prior.instruments.len() != data.n_instruments() || prior.sources.len() != data.n_sources()
    {
        return Err(Error::Usage(format!(
            "prior covers {} instruments / {} sources, data is {} x {}",
            prior.instruments.len(),
            prior.sources.len(),
            data.n_instruments(),
            data.n_sources()
        )));
    }
    Ok(())
}

/// Log prior density of a state.
pub fn log_prior(state: &ParameterState, prior: &CalibrationPrior) -> f64 {
    let inst: f64 = prior
        .instruments
        .iter()
        .zip(state.log_area.iter().zip(&state.variance))
        .map(|(p, (&b, &v))| p.log_area.log_density(b) + p.variance.log_density(v))
        .sum();
    let src: f64 = prior
        .sources
        .iter()
        .zip(&state.log_flux)
        .map(|(p, &g)| p.log_density(g))
        .sum();
    inst + src
}

/// Unnormalized log posterior: likelihood plus the priors on `B`, `G` and `v`.
pub fn log_posterior(
    state: &ParameterState,
    data: &LogScaleData,
    prior: &CalibrationPrior,
) -> Result<f64> {
    check_prior_dims(prior, data)?;
    Ok(log_likelihood(state, data)? + log_prior(state, prior))
}

/// Gradient of [`log_posterior`] in `(B, G, v)`.
pub fn log_posterior_gradient(
    state: &ParameterState,
    data: &LogScaleData,
    prior: &CalibrationPrior,
) -> Result<Gradient> {
    state.check_dims(data)?;
    check_prior_dims(prior, data)?;
    let mut g = Gradient {
        log_area: vec![0.0; data.n_instruments()],
        log_flux: vec![0.0; data.n_sources()],
        variance: vec![0.0; data.n_instruments()],
    };
    for e in data.entries() {
        let v = state.variance[e.instrument];
        let r = e.y - hvc_mean(state.log_area[e.instrument], state.log_flux[e.source], v);
        g.log_area[e.instrument] += r / v;
        g.log_flux[e.source] += r / v;
        g.variance[e.instrument] += -0.5 / v - r / (2.0 * v) + r * r / (2.0 * v * v);
    }
    for (i, p) in prior.instruments.iter().enumerate() {
        g.log_area[i] += p.log_area.d_log_density(state.log_area[i]);
        g.variance[i] += p.variance.d_log_density(state.variance[i]);
    }
    for (j, p) in prior.sources.iter().enumerate() {
        g.log_flux[j] += p.d_log_density(state.log_flux[j]);
    }
    Ok(g)
}

/// Validated data + prior pair shared by the estimators and samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub data: LogScaleData,
    pub prior: CalibrationPrior,
}

impl Model {
    /// Checks dimensions, prior sanity and identifiability: every connected
    /// component of the incidence graph must be anchored by a finite-spread
    /// instrument prior or a proper source prior.
    pub fn new(data: LogScaleData, prior: CalibrationPrior) -> Result<Self> {
        check_prior_dims(&prior, &data)?;
        prior.validate()?;
        let n = data.n_instruments();
        let m = data.n_sources();
        let mut parent: Vec<usize> = (0..n + m).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in data.entries() {
            let a = find(&mut parent, e.instrument);
            let b = find(&mut parent, n + e.source);
            parent[a] = b;
        }
        let mut anchored = vec![false; n + m];
        for (i, p) in prior.instruments.iter().enumerate() {
            if !p.log_area.is_flat() {
                let r = find(&mut parent, i);
                anchored[r] = true;
            }
        }
        for (j, p) in prior.sources.iter().enumerate() {
            if !p.is_flat() {
                let r = find(&mut parent, n + j);
                anchored[r] = true;
            }
        }
        for i in 0..n {
            let r = find(&mut parent, i);
            if !anchored[r] {
                return Err(Error::Configuration(format!(
                    "instrument {i} belongs to a group of instruments and sources with no finite \
                     prior spread; its areas and fluxes are not identifiable"
                )));
            }
        }
        Ok(Self { data, prior })
    }

    pub fn n_instruments(&self) -> usize {
        self.data.n_instruments()
    }

    pub fn n_sources(&self) -> usize {
        self.data.n_sources()
    }

    pub fn log_posterior(&self, state: &ParameterState) -> f64 {
        log_posterior(state, &self.data, &self.prior).expect("model dimensions are consistent")
    }

    pub fn gradient(&self, state: &ParameterState) -> Gradient {
        log_posterior_gradient(state, &self.data, &self.prior)
            .expect("model dimensions are consistent")
    }
}

/// Which posterior algorithm produced a draw sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "vanilla-gibbs")]
    VanillaGibbs,
    #[serde(rename = "block-gibbs")]
    BlockGibbs,
    #[serde(rename = "hmc")]
    Hmc,
    #[serde(rename = "exact-iid")]
    ExactIid,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::VanillaGibbs,
        Method::BlockGibbs,
        Method::Hmc,
        Method::ExactIid,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::VanillaGibbs => "vanilla-gibbs",
            Method::BlockGibbs => "block-gibbs",
            Method::Hmc => "hmc",
            Method::ExactIid => "exact-iid",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method '{s}'")))
    }
}

/// Per-chain sampler bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    /// Mean Metropolis acceptance probability (HMC) or empirical acceptance rate (exact-iid).
    pub acceptance: Option<f64>,
    pub divergences: usize,
    pub step_size: Option<f64>,
    pub proposals: Option<u64>,
    pub envelope_restarts: usize,
    /// Largest observed `log target - log proposal - log K` (≤ 0 on a sound envelope).
    pub max_envelope_excess: Option<f64>,
    pub warnings: Vec<String>,
}

/// Ordered post-warmup draws from one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawSequence {
    pub method: Method,
    pub chain: u32,
    pub seed: u64,
    pub warmup: usize,
    pub draws: Vec<ParameterState>,
    pub stats: ChainStats,
}

impl DrawSequence {
    pub fn new(
        method: Method,
        chain: u32,
        seed: u64,
        warmup: usize,
        draws: Vec<ParameterState>,
        stats: ChainStats,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Usage("draw sequence is empty".into()));
        }
        for d in &draws {
            d.check()?;
        }
        Ok(Self {
            method,
            chain,
            seed,
            warmup,
            draws,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Column of flattened coordinate `k` of `(B, G, v)`.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        let n = self.draws[0].n_instruments();
        let m = self.draws[0].n_sources();
        self.draws
            .iter()
            .map(|d| {
                if k < n {
                    d.log_area[k]
                } else if k < n + m {
                    d.log_flux[k - n]
                } else {
                    d.variance[k - n - m]
                }
            })
            .collect()
    }
}

/// `0.5 * log(2π)`, exposed for tests of the normalizing constants.
pub fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table(entries: &[(usize, usize, f64, f64)], n: usize, m: usize) -> ObservationTable {
        ObservationTable::new(
            n,
            m,
            entries
                .iter()
                .map(|&(i, j, c, t)| Entry {
                    instrument: i,
                    source: j,
                    count: c,
                    adjustment: t,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn log_transform_examples() {
        let d = log_transform(&table(&[(0, 0, 100.0, 4.0), (0, 1, 1.0, 1.0)], 1, 2));
        assert_relative_eq!(d.entries()[0].y, 25f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(d.entries()[0].y, 3.2189, epsilon = 1e-4);
        assert_eq!(d.entries()[1].y, 0.0);
        assert_eq!(d.instrument_count(0), 2);
    }

    #[test]
    fn table_invariants_rejected() {
        let mk = |e: Vec<Entry>| ObservationTable::new(2, 2, e);
        let e = |i, j, c, t| Entry {
            instrument: i,
            source: j,
            count: c,
            adjustment: t,
        };
        assert!(mk(vec![e(0, 0, 1.0, 1.0), e(0, 0, 2.0, 1.0), e(1, 1, 1.0, 1.0)]).is_err());
        assert!(mk(vec![e(0, 0, 1.0, 1.0), e(0, 1, 1.0, 1.0)]).is_err());
        assert!(matches!(
            mk(vec![e(0, 0, 0.0, 1.0), e(1, 1, 1.0, 1.0)]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            mk(vec![e(0, 0, 1.0, -1.0), e(1, 1, 1.0, 1.0)]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn hvc_mean_examples() {
        assert_eq!(hvc_mean(0.0, 0.0, 0.0), 0.0);
        assert_relative_eq!(hvc_mean(2f64.ln(), 3f64.ln(), 0.5), 6f64.ln() - 0.25, epsilon = 1e-15);
    }

    #[test]
    fn expected_count_examples() {
        assert_eq!(expected_count(2.0, 3.0, 5.0).unwrap(), 30.0);
        assert_eq!(expected_count(1.0, 1.7, 2.5).unwrap(), 1.7 * 2.5);
        assert!(expected_count(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn expected_count_matches_lognormal_mean_by_quadrature() {
        // E[T exp(Y)] with Y ~ Normal(hvc_mean, v) at (T, A, F, v) = (1, 2, 3, 0.4).
        let (t, a, f, v): (f64, f64, f64, f64) = (1.0, 2.0, 3.0, 0.4);
        let mu = hvc_mean(a.ln(), f.ln(), v);
        let sd = v.sqrt();
        let n = 200_000;
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let y = lo + k as f64 * h;
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let dens = (-(y - mu).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
            acc += w * t * y.exp() * dens;
        }
        acc *= h / 3.0;
        assert_relative_eq!(acc, expected_count(t, a, f).unwrap(), max_relative = 1e-9);
    }

    #[test]
    fn likelihood_at_mean_is_normal_peak() {
        let data = LogScaleData::from_cells(1, 1, [(0, 0, hvc_mean(0.3, -0.2, 1.0))]).unwrap();
        let s = ParameterState::new(vec![0.3], vec![-0.2], vec![1.0]).unwrap();
        assert_relative_eq!(log_likelihood(&s, &data).unwrap(), -half_ln_2pi(), epsilon = 1e-14);
    }

    #[test]
    fn doubling_variance_changes_term_by_closed_form() {
        // y sits at the mean for v = 1; at v = 2 the mean shifts by -1/2.
        let (b, g) = (0.4, 0.1);
        let y = hvc_mean(b, g, 1.0);
        let data = LogScaleData::from_cells(1, 1, [(0, 0, y)]).unwrap();
        let l1 = log_likelihood(&ParameterState::new(vec![b], vec![g], vec![1.0]).unwrap(), &data)
            .unwrap();
        let l2 = log_likelihood(&ParameterState::new(vec![b], vec![g], vec![2.0]).unwrap(), &data)
            .unwrap();
        let shift: f64 = 0.5;
        assert_relative_eq!(l2 - l1, -0.5 * 2f64.ln() - shift * shift / 4.0, epsilon = 1e-14);
    }

    #[test]
    fn normal_prior_term() {
        let p = NormalPrior::new(0.0, 1.0);
        assert_relative_eq!(p.log_density(1.0), -0.5 - half_ln_2pi(), epsilon = 1e-14);
        assert_eq!(NormalPrior::flat().log_density(123.0), 0.0);
    }

    #[test]
    fn posterior_prior_off_limit() {
        let data = LogScaleData::from_cells(2, 1, [(0, 0, 0.2), (1, 0, -0.1)]).unwrap();
        let s = ParameterState::new(vec![0.1, 0.0], vec![0.05], vec![0.3, 0.5]).unwrap();
        let flat = CalibrationPrior::new(
            vec![
                InstrumentPrior {
                    log_area: NormalPrior::flat(),
                    variance: VariancePrior::InverseGamma { shape: 2.0, scale: 0.1 },
                };
                2
            ],
            1,
        );
        let ll = log_likelihood(&s, &data).unwrap();
        let lp = log_posterior(&s, &data, &flat).unwrap();
        let ig: f64 = s
            .variance
            .iter()
            .map(|&v| 2.0 * 0.1f64.ln() - ln_gamma(2.0) - 3.0 * v.ln() - 0.1 / v)
            .sum();
        assert_relative_eq!(lp, ll + ig, epsilon = 1e-12);
        let improper = flat.with_variance_prior(VariancePrior::Improper);
        let lp = log_posterior(&s, &data, &improper).unwrap();
        let jac: f64 = s.variance.iter().map(|v| -v.ln()).sum();
        assert_relative_eq!(lp, ll + jac, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let data = LogScaleData::from_cells(1, 1, [(0, 0, 0.0)]).unwrap();
        let s = ParameterState::new(vec![0.0, 0.0], vec![0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(log_likelihood(&s, &data), Err(Error::Usage(_))));
    }

    #[test]
    fn identifiability_rules() {
        let data = LogScaleData::from_cells(2, 2, [(0, 0, 0.0), (1, 1, 0.0)]).unwrap();
        let anchored = |tau0: f64, tau1: f64| {
            CalibrationPrior::new(
                vec![InstrumentPrior::from_estimate(1.0, tau0), InstrumentPrior::from_estimate(1.0, tau1)],
                2,
            )
        };
        assert!(matches!(
            Model::new(data.clone(), anchored(f64::INFINITY, f64::INFINITY)),
            Err(Error::Configuration(_))
        ));
        // Disconnected table: the second block has no anchor.
        assert!(matches!(
            Model::new(data.clone(), anchored(0.1, f64::INFINITY)),
            Err(Error::Configuration(_))
        ));
        assert!(Model::new(data, anchored(0.1, 0.2)).is_ok());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("nuts".parse::<Method>().is_err());
    }
}
