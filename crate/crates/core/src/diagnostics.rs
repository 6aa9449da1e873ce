//! Convergence statistics, posterior summaries and cross-sampler agreement.

use serde::{Deserialize, Serialize};

use crate::domain::DrawSequence;
use crate::error::{Error, Result};

/// Effective sample size of one series.
pub fn ess(series: &[f64]) -> Result<f64> {
    ess_chains(&[series])
}

/// Multi-chain effective sample size by Geyer's initial monotone sequence.
///
/// Chains are truncated to the shortest length. Antithetic series can yield
/// an estimate above the number of draws; the reported value is capped at
/// `total · log10(total)`. Errors on a constant series.
pub fn ess_chains(chains: &[&[f64]]) -> Result<f64> {
    let (chains, n) = aligned(chains)?;
    let m = chains.len();
    let total = (m * n) as f64;
    if n < 4 {
        return Err(Error::Usage("effective sample size needs at least 4 draws per chain".into()));
    }
    let first = chains[0][0];
    if chains.iter().all(|c| c.iter().all(|&x| x == first)) {
        return Err(Error::Usage("effective sample size is undefined for a constant series".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |t: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - t).map(|k| (c[k] - mu) * (c[k + t] - mu)).sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let w = acov0 * n as f64 / (n as f64 - 1.0);
    let between = if m > 1 { sample_variance(&means) } else { 0.0 };
    let var_plus = w * (n as f64 - 1.0) / n as f64 + between;
    if !(w > 0.0) || !(var_plus > 0.0) {
        return Err(Error::Usage("effective sample size is undefined for a constant series".into()));
    }
    let rho = |a: f64| 1.0 - (w - a) / var_plus;

    let mut rho_t = vec![0.0; n];
    rho_t[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho(acov(1));
    rho_t[1] = rho_odd;
    let mut t = 1;
    while t + 5 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho(acov(t + 1));
        rho_odd = rho(acov(t + 2));
        if rho_even + rho_odd >= 0.0 {
            rho_t[t + 1] = rho_even;
            rho_t[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    // The even half of the first rejected pair still carries information.
    let tail = if max_t > 1 && rho_even > 0.0 { rho_even } else { 0.0 };
    // Enforce a monotone sequence of pair sums.
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho_t[t - 1] + rho_t[t];
        if rho_t[t + 1] + rho_t[t + 2] > prev {
            rho_t[t + 1] = prev / 2.0;
            rho_t[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let tau = -1.0 + 2.0 * rho_t[..=max_t].iter().sum::<f64>() + tail;
    let tau = tau.max(1.0 / total.log10());
    Ok(total / tau)
}

/// Split-R̂: every chain is halved and the halves are compared as chains.
/// A single chain is allowed.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    let (chains, n) = aligned(chains)?;
    let half = n / 2;
    if half < 2 {
        return Err(Error::Usage("split R-hat needs at least 4 draws per chain".into()));
    }
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in &chains {
        parts.push(&c[..half]);
        parts.push(&c[n - half..]);
    }
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let w = parts.iter().map(|p| sample_variance(p)).sum::<f64>() / parts.len() as f64;
    let b_over_n = sample_variance(&means);
    if w == 0.0 {
        return Ok(if b_over_n == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let h = half as f64;
    let var_plus = (h - 1.0) / h * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

fn aligned<'a>(chains: &[&'a [f64]]) -> Result<(Vec<&'a [f64]>, usize)> {
    if chains.is_empty() || chains.iter().any(|c| c.is_empty()) {
        return Err(Error::Usage("no draws supplied".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    Ok((chains.iter().map(|c| &c[..n]).collect(), n))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 || x.iter().all(|&v| v == x[0]) {
        return 0.0;
    }
    let mu = mean(x);
    x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (x.len() - 1) as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Model parameters `B`, `G` and `v`.
    Log,
    /// `A = exp(B)` and `F = exp(G)`.
    Natural,
}

impl Scale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Log => "log",
            Scale::Natural => "natural",
        }
    }
}

/// Which model quantity a summary row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    LogArea(usize),
    LogFlux(usize),
    Variance(usize),
    Area(usize),
    Flux(usize),
}

impl Quantity {
    pub fn scale(&self) -> Scale {
        match self {
            Quantity::Area(_) | Quantity::Flux(_) => Scale::Natural,
            _ => Scale::Log,
        }
    }

    /// Default label; indices are zero-based.
    pub fn label(&self) -> String {
        match self {
            Quantity::LogArea(i) => format!("log_area[{i}]"),
            Quantity::LogFlux(j) => format!("log_flux[{j}]"),
            Quantity::Variance(i) => format!("variance[{i}]"),
            Quantity::Area(i) => format!("area[{i}]"),
            Quantity::Flux(j) => format!("flux[{j}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub quantity: Quantity,
    pub name: String,
    pub scale: Scale,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub mcse: f64,
    /// Effective sample size, at most the number of draws.
    pub ess: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<ParameterSummary>,
    pub total_draws: usize,
}

impl SummaryTable {
    pub fn get(&self, q: Quantity) -> Option<&ParameterSummary> {
        self.rows.iter().find(|r| r.quantity == q)
    }

    pub fn max_rhat(&self) -> f64 {
        self.rows.iter().map(|r| r.rhat).fold(1.0, f64::max)
    }
}

fn dims(seqs: &[DrawSequence]) -> Result<(usize, usize)> {
    let first = seqs
        .first()
        .and_then(|s| s.draws.first())
        .ok_or_else(|| Error::Usage("no draws to summarize".into()))?;
    let d = (first.n_instruments(), first.n_sources());
    for s in seqs {
        if s.is_empty() || s.draws.iter().any(|x| (x.n_instruments(), x.n_sources()) != d) {
            return Err(Error::Usage("draw sequences have mismatched parameter sets".into()));
        }
    }
    Ok(d)
}

fn columns(seqs: &[DrawSequence], q: Quantity) -> Vec<Vec<f64>> {
    let (n, m) = (seqs[0].draws[0].n_instruments(), seqs[0].draws[0].n_sources());
    seqs.iter()
        .map(|s| match q {
            Quantity::LogArea(i) => s.coordinate(i),
            Quantity::LogFlux(j) => s.coordinate(n + j),
            Quantity::Variance(i) => s.coordinate(n + m + i),
            Quantity::Area(i) => s.coordinate(i).into_iter().map(f64::exp).collect(),
            Quantity::Flux(j) => s.coordinate(n + j).into_iter().map(f64::exp).collect(),
        })
        .collect()
}

fn all_quantities(n: usize, m: usize, natural: bool) -> Vec<Quantity> {
    let mut q: Vec<Quantity> = (0..n)
        .map(Quantity::LogArea)
        .chain((0..m).map(Quantity::LogFlux))
        .chain((0..n).map(Quantity::Variance))
        .collect();
    if natural {
        q.extend((0..n).map(Quantity::Area));
        q.extend((0..m).map(Quantity::Flux));
    }
    q
}

struct ColumnStats {
    mean: f64,
    sd: f64,
    ess: f64,
    pooled: Vec<f64>,
}

fn column_stats(cols: &[Vec<f64>]) -> ColumnStats {
    let pooled: Vec<f64> = cols.iter().flatten().copied().collect();
    let total = pooled.len() as f64;
    let mu = mean(&pooled);
    let sd = sample_variance(&pooled).sqrt();
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    // A constant column carries no Monte Carlo error.
    let ess = ess_chains(&refs).map(|e| e.min(total)).unwrap_or(total);
    ColumnStats {
        mean: mu,
        sd,
        ess,
        pooled,
    }
}

/// Summaries of `B`, `G`, `v` and, from exponentiated draws, of `A` and `F`.
pub fn summarize(seqs: &[DrawSequence]) -> Result<SummaryTable> {
    let (n, m) = dims(seqs)?;
    let mut rows = Vec::new();
    let mut total_draws = 0;
    for q in all_quantities(n, m, true) {
        let cols = columns(seqs, q);
        let st = column_stats(&cols);
        total_draws = st.pooled.len();
        let mut sorted = st.pooled.clone();
        sorted.sort_by(f64::total_cmp);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let rhat = split_rhat(&refs).unwrap_or(f64::NAN);
        rows.push(ParameterSummary {
            quantity: q,
            name: q.label(),
            scale: q.scale(),
            mean: st.mean,
            sd: st.sd,
            q025: quantile_sorted(&sorted, 0.025),
            q50: quantile_sorted(&sorted, 0.5),
            q975: quantile_sorted(&sorted, 0.975),
            mcse: st.sd / st.ess.sqrt(),
            ess: st.ess,
            rhat,
        });
    }
    Ok(SummaryTable { rows, total_draws })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// (Stephens' small-sample correction on the effective size).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("KS test needs two nonempty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (na, nb) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let t = x[i].min(y[j]);
        while i < x.len() && x[i] <= t {
            i += 1;
        }
        while j < y.len() && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// One-sample KS test against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if sample.is_empty() {
        return Err(Error::Usage("KS test needs a nonempty sample".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let f = cdf(v);
            ((k + 1) as f64 / n - f).max(f - k as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^(k-1) exp(-2 k² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u32 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Lag-`k` sample autocorrelation.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let mu = mean(x);
    let c0: f64 = x.iter().map(|v| (v - mu) * (v - mu)).sum();
    if c0 == 0.0 {
        return 0.0;
    }
    (0..n - lag).map(|k| (x[k] - mu) * (x[k + lag] - mu)).sum::<f64>() / c0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub quantity: Quantity,
    pub name: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `|mean_a - mean_b|` in units of the combined Monte Carlo standard error.
    pub z: f64,
    pub ks: KsResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub rows: Vec<AgreementRow>,
    pub max_z: f64,
    pub min_ks_p: f64,
    pub pass: bool,
}

pub const AGREEMENT_MAX_Z: f64 = 3.0;
pub const AGREEMENT_MIN_P: f64 = 0.01;

const SPACING_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Smallest of the mean ESS and the ESS of the indicators `x ≤ q` at a few
/// quantiles. Distribution tests need the tails to mix, not just the mean.
fn spacing_ess(cols: &[Vec<f64>], mean_ess: f64) -> f64 {
    let mut sorted: Vec<f64> = cols.iter().flatten().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let mut worst = mean_ess;
    for q in SPACING_QUANTILES {
        let cut = quantile_sorted(&sorted, q);
        let ind: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| c.iter().map(|&x| if x <= cut { 1.0 } else { 0.0 }).collect())
            .collect();
        let refs: Vec<&[f64]> = ind.iter().map(|c| c.as_slice()).collect();
        if let Ok(e) = ess_chains(&refs) {
            worst = worst.min(e);
        }
    }
    worst
}

/// Every chain thinned to about one draw per effective sample, then pooled.
fn thinned(cols: &[Vec<f64>], ess: f64) -> Vec<f64> {
    let total: usize = cols.iter().map(|c| c.len()).sum();
    let step = ((total as f64 / ess).ceil() as usize).max(1);
    cols.iter()
        .flat_map(|c| c.iter().step_by(step).copied())
        .collect()
}

/// Compares two sets of chains for the same model parameter by parameter.
///
/// KS tests run on draws thinned to roughly one per effective sample, using
/// the worst of the mean and quantile-indicator effective sizes. PASS
/// requires every standardized mean difference below 3 and every KS p-value
/// above 0.01.
pub fn agreement_report(a: &[DrawSequence], b: &[DrawSequence]) -> Result<AgreementReport> {
    let da = dims(a)?;
    let db = dims(b)?;
    if da != db {
        return Err(Error::Usage(format!(
            "cannot compare draws with parameter sets {da:?} and {db:?}"
        )));
    }
    let mut rows = Vec::new();
    for q in all_quantities(da.0, da.1, false) {
        let ca = columns(a, q);
        let cb = columns(b, q);
        let sa = column_stats(&ca);
        let sb = column_stats(&cb);
        let diff = (sa.mean - sb.mean).abs();
        let se = ((sa.sd * sa.sd) / sa.ess + (sb.sd * sb.sd) / sb.ess).sqrt();
        let z = if diff == 0.0 { 0.0 } else { diff / se };
        let ks = ks_two_sample(
            &thinned(&ca, spacing_ess(&ca, sa.ess)),
            &thinned(&cb, spacing_ess(&cb, sb.ess)),
        )?;
        rows.push(AgreementRow {
            quantity: q,
            name: q.label(),
            mean_a: sa.mean,
            mean_b: sb.mean,
            z,
            ks,
        });
    }
    let max_z = rows.iter().map(|r| r.z).fold(0.0, f64::max);
    let min_ks_p = rows.iter().map(|r| r.ks.p_value).fold(1.0, f64::min);
    Ok(AgreementReport {
        pass: max_z < AGREEMENT_MAX_Z && min_ks_p > AGREEMENT_MIN_P,
        rows,
        max_z,
        min_ks_p,
    })
}
