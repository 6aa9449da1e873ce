//! Synthetic observation tables from a known truth.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::KeyValueConfig;
use crate::domain::{Entry, ObservationTable};
use crate::error::{Error, Result};

const ZERO_RESAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regime {
    Poisson,
    /// Log-normal counts with the given per-instrument log-scale variances.
    Lognormal { variance: Vec<f64> },
    /// Poisson counts thinned by a saturation model of strength `strength` at
    /// reference count `scale`.
    Pileup { strength: f64, scale: f64 },
}

/// Known effective areas, fluxes and adjustments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub area: Vec<f64>,
    pub flux: Vec<f64>,
    /// Adjustment `T_ij` for every observed pair `(i, j)`.
    pub adjustment: Vec<(usize, usize, f64)>,
    pub regime: Regime,
}

/// A generated table with notes about any cells that had to be dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub table: ObservationTable,
    pub warnings: Vec<String>,
}

impl TruthSpec {
    /// Every instrument observes every source with adjustment `t`.
    pub fn complete(area: Vec<f64>, flux: Vec<f64>, t: f64, regime: Regime) -> Result<Self> {
        let adjustment = (0..area.len())
            .flat_map(|i| (0..flux.len()).map(move |j| (i, j, t)))
            .collect();
        let s = Self {
            area,
            flux,
            adjustment,
            regime,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_instruments(&self) -> usize {
        self.area.len()
    }

    pub fn n_sources(&self) -> usize {
        self.flux.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.area.len(), self.flux.len());
        if n == 0 || m == 0 {
            return Err(Error::Usage("truth needs at least one instrument and one source".into()));
        }
        for &(i, j, t) in &self.adjustment {
            if i >= n || j >= m {
                return Err(Error::Usage(format!("adjustment for ({i}, {j}) is out of range")));
            }
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::Domain(format!("adjustment for ({i}, {j}) is {t}")));
            }
        }
        for (name, xs) in [("area", &self.area), ("flux", &self.flux)] {
            if let Some(x) = xs.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Domain(format!("{name} value {x} is not a nonnegative number")));
            }
        }
        match &self.regime {
            Regime::Poisson => {}
            Regime::Lognormal { variance } => {
                if variance.len() != n {
                    return Err(Error::Usage(format!(
                        "{} variances for {n} instruments",
                        variance.len()
                    )));
                }
                if variance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Domain("log-normal variances must be nonnegative".into()));
                }
            }
            Regime::Pileup { strength, scale } => {
                if !(*strength >= 0.0) {
                    return Err(Error::Domain(format!("pileup strength {strength} is negative")));
                }
                if !(*scale > 0.0) {
                    return Err(Error::Domain(format!("pileup scale {scale} must be positive")));
                }
            }
        }
        Ok(())
    }

    fn mean(&self, i: usize, j: usize, t: f64) -> Result<f64> {
        let mu = t * self.area[i] * self.flux[j];
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Domain(format!("expected count for ({i}, {j}) is {mu}")));
        }
        Ok(mu)
    }

    /// Writes the truth as `key = value` lines.
    ///
    /// `adjustment` holds `i:j:T` triples separated by commas.
    pub fn to_config(&self) -> KeyValueConfig {
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let mut c = KeyValueConfig::new();
        c.set("area", join(&self.area));
        c.set("flux", join(&self.flux));
        c.set(
            "adjustment",
            self.adjustment
                .iter()
                .map(|(i, j, t)| format!("{i}:{j}:{t:?}"))
                .collect::<Vec<_>>()
                .join(", "),
        );
        match &self.regime {
            Regime::Poisson => c.set("regime", "poisson"),
            Regime::Lognormal { variance } => {
                c.set("regime", "lognormal");
                c.set("variance", join(variance));
            }
            Regime::Pileup { strength, scale } => {
                c.set("regime", "pileup");
                c.set("pileup_strength", format!("{strength:?}"));
                c.set("pileup_scale", format!("{scale:?}"));
            }
        }
        c
    }

    /// Reads a truth written by [`TruthSpec::to_config`].
    ///
    /// `adjustment` may also be a single number, meaning every pair is observed
    /// with that adjustment; it defaults to 1.
    pub fn from_config(c: &KeyValueConfig) -> Result<Self> {
        c.check_known(&[
            "area",
            "flux",
            "adjustment",
            "regime",
            "variance",
            "pileup_strength",
            "pileup_scale",
            "seed",
        ])?;
        let area: Vec<f64> = c
            .list("area")?
            .ok_or_else(|| Error::Usage("missing required key 'area'".into()))?;
        let flux: Vec<f64> = c
            .list("flux")?
            .ok_or_else(|| Error::Usage("missing required key 'flux'".into()))?;
        let regime = match c.get("regime").unwrap_or("poisson") {
            "poisson" => Regime::Poisson,
            "lognormal" => Regime::Lognormal {
                variance: c
                    .list("variance")?
                    .ok_or_else(|| Error::Usage("lognormal regime needs 'variance'".into()))?,
            },
            "pileup" => Regime::Pileup {
                strength: c.required("pileup_strength")?,
                scale: c.required("pileup_scale")?,
            },
            other => return Err(Error::Usage(format!("unknown regime '{other}'"))),
        };
        let adj = c.get("adjustment").unwrap_or("1");
        let spec = if let Ok(t) = adj.parse::<f64>() {
            Self::complete(area, flux, t, regime)?
        } else {
            let adjustment = adj
                .split(',')
                .map(|cell| {
                    let parts: Vec<&str> = cell.trim().split(':').collect();
                    let bad = || Error::Usage(format!("key 'adjustment': malformed cell '{}'", cell.trim()));
                    if parts.len() != 3 {
                        return Err(bad());
                    }
                    Ok((
                        parts[0].parse().map_err(|_| bad())?,
                        parts[1].parse().map_err(|_| bad())?,
                        parts[2].parse().map_err(|_| bad())?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Self {
                area,
                flux,
                adjustment,
                regime,
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build(spec: &TruthSpec, entries: Vec<Entry>, warnings: Vec<String>) -> Result<Simulated> {
    Ok(Simulated {
        table: ObservationTable::new(spec.n_instruments(), spec.n_sources(), entries)?,
        warnings,
    })
}

/// Poisson counts with mean `T_ij A_i F_j`. Zero counts are redrawn up to 100
/// times, after which the pair is dropped with a warning.
pub fn gen_poisson(spec: &TruthSpec, seed: u64) -> Result<Simulated> {
    spec.validate()?;
    let mut rng = rng_for(seed, 0);
    let mut entries = Vec::with_capacity(spec.adjustment.len());
    let mut warnings = Vec::new();
    for &(i, j, t) in &spec.adjustment {
        let mu = spec.mean(i, j, t)?;
        let law = Poisson::new(mu).map_err(|e| Error::Domain(format!("Poisson mean {mu}: {e}")))?;
        let count = (0..=ZERO_RESAMPLES).map(|_| law.sample(&mut rng)).find(|c| *c > 0.0);
        match count {
            Some(c) => entries.push(Entry {
                instrument: i,
                source: j,
                count: c,
                adjustment: t,
            }),
            None => warnings.push(format!(
                "dropped pair ({i}, {j}): zero count after {ZERO_RESAMPLES} redraws"
            )),
        }
    }
    build(spec, entries, warnings)
}

/// Log-normal counts `T_ij exp(Normal(B_i + G_j - v_i/2, v_i))`, so that
/// `E[c_ij / T_ij] = A_i F_j`.
pub fn gen_lognormal(spec: &TruthSpec, seed: u64) -> Result<Simulated> {
    spec.validate()?;
    let Regime::Lognormal { variance } = &spec.regime else {
        return Err(Error::Usage("gen_lognormal needs the lognormal regime".into()));
    };
    let mut rng = rng_for(seed, 0);
    let mut entries = Vec::with_capacity(spec.adjustment.len());
    for &(i, j, t) in &spec.adjustment {
        spec.mean(i, j, t)?;
        let v = variance[i];
        let mu = spec.area[i].ln() + spec.flux[j].ln() - 0.5 * v;
        let z: f64 = StandardNormal.sample(&mut rng);
        entries.push(Entry {
            instrument: i,
            source: j,
            count: t * (mu + v.sqrt() * z).exp(),
            adjustment: t,
        });
    }
    build(spec, entries, Vec::new())
}

/// Count-dependent thinning: `detected ~ Binomial(round(c), exp(-λ c / E))`.
/// Cells left with zero detections are dropped with a warning.
pub fn apply_pileup(table: &ObservationTable, strength: f64, scale: f64, seed: u64) -> Result<Simulated> {
    if !(strength >= 0.0) {
        return Err(Error::Domain(format!("pileup strength {strength} is negative")));
    }
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("pileup scale {scale} must be positive")));
    }
    let mut rng = rng_for(seed, 1);
    let mut entries = Vec::with_capacity(table.entries().len());
    let mut warnings = Vec::new();
    for e in table.entries() {
        let trials = e.count.round() as u64;
        let survive = (-strength * e.count / scale).exp();
        let law = Binomial::new(trials, survive)
            .map_err(|err| Error::Domain(format!("pileup survival {survive}: {err}")))?;
        let detected = law.sample(&mut rng);
        if detected == 0 {
            warnings.push(format!(
                "dropped pair ({}, {}): no detections after pileup",
                e.instrument, e.source
            ));
            continue;
        }
        entries.push(Entry {
            count: detected as f64,
            ..*e
        });
    }
    Ok(Simulated {
        table: ObservationTable::new(table.n_instruments(), table.n_sources(), entries)?,
        warnings,
    })
}

/// Generates a table according to the truth's regime.
pub fn simulate(spec: &TruthSpec, seed: u64) -> Result<Simulated> {
    match &spec.regime {
        Regime::Poisson => gen_poisson(spec, seed),
        Regime::Lognormal { .. } => gen_lognormal(spec, seed),
        Regime::Pileup { strength, scale } => {
            let base = gen_poisson(spec, seed)?;
            let mut out = apply_pileup(&base.table, *strength, *scale, seed)?;
            let mut warnings = base.warnings;
            warnings.append(&mut out.warnings);
            out.warnings = warnings;
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson_truth(area: f64, flux: f64, t: f64) -> TruthSpec {
        TruthSpec::complete(vec![area], vec![flux], t, Regime::Poisson).unwrap()
    }

    #[test]
    fn poisson_cell_mean() {
        let spec = poisson_truth(2.0, 3.0, 5.0);
        let reps = 100_000;
        let mut rng = rng_for(1, 0);
        let law = Poisson::new(30.0).unwrap();
        let direct: f64 = (0..reps).map(|_| law.sample(&mut rng)).sum::<f64>() / reps as f64;
        let generated: f64 = (0..2000u64)
            .map(|s| gen_poisson(&spec, s).unwrap().table.entries()[0].count)
            .sum::<f64>()
            / 2000.0;
        assert!((direct - 30.0).abs() < 3.0 * (30.0f64 / reps as f64).sqrt());
        assert!((generated - 30.0).abs() < 3.0 * (30.0f64 / 2000.0).sqrt());
    }

    #[test]
    fn zero_mean_is_a_domain_error() {
        let spec = poisson_truth(2.0, 3.0, 0.0);
        assert!(matches!(gen_poisson(&spec, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let spec = TruthSpec::complete(
            vec![1.0, 2.0],
            vec![10.0, 20.0, 30.0],
            1.0,
            Regime::Lognormal { variance: vec![0.1, 0.2] },
        )
        .unwrap();
        assert_eq!(gen_lognormal(&spec, 9).unwrap(), gen_lognormal(&spec, 9).unwrap());
        assert_ne!(gen_lognormal(&spec, 9).unwrap(), gen_lognormal(&spec, 10).unwrap());
    }

    #[test]
    fn zero_variance_lognormal_is_exact() {
        let spec = TruthSpec::complete(
            vec![2.0],
            vec![3.0, 4.0],
            1.5,
            Regime::Lognormal { variance: vec![0.0] },
        )
        .unwrap();
        let t = gen_lognormal(&spec, 1).unwrap().table;
        assert!((t.entries()[0].count - 9.0).abs() < 1e-12);
        assert!((t.entries()[1].count - 12.0).abs() < 1e-12);
    }

    #[test]
    fn pileup_identity_and_domain() {
        let spec = poisson_truth(20.0, 30.0, 1.0);
        let base = gen_poisson(&spec, 4).unwrap().table;
        let same = apply_pileup(&base, 0.0, 100.0, 4).unwrap().table;
        assert_eq!(same, base);
        assert!(apply_pileup(&base, -0.1, 100.0, 4).is_err());
    }

    #[test]
    fn config_round_trip() {
        let spec = TruthSpec {
            area: vec![1.5, 2.0],
            flux: vec![0.1, 7.0],
            adjustment: vec![(0, 0, 1.0), (0, 1, 2.5), (1, 1, 0.5)],
            regime: Regime::Pileup {
                strength: 0.2,
                scale: 1000.0,
            },
        };
        let text = spec.to_config().to_string();
        let back = TruthSpec::from_config(&KeyValueConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
