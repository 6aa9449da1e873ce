//! The `run` command: configuration, fitting/sampling and report assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use concordance::config::KeyValueConfig;
use concordance::diagnostics::{agreement_report, summarize, AgreementReport, Quantity};
use concordance::domain::{log_transform, ChainStats, DrawSequence, Method};
use concordance::samplers::EnvelopeShape;
use concordance::{fit_mode, FitTarget, Model, ModeConfig, SamplerConfig, SamplerRegistry};
use serde::Serialize;

use crate::ingest::{ingest, DefaultVariancePrior, IdMap};
use crate::output::{self, SummaryLine};
use crate::{core_error, CliError};

pub const RHAT_WARN: f64 = 1.05;

const KNOWN_KEYS: [&str; 22] = [
    "observations",
    "calibration",
    "method",
    "iterations",
    "warmup",
    "chains",
    "seed",
    "tolerance",
    "max_iters",
    "output",
    "variance_prior",
    "alpha",
    "beta",
    "hmc_step_size",
    "hmc_steps",
    "hmc_target_accept",
    "hmc_jitter",
    "exact_margin",
    "exact_max_proposals",
    "exact_shape",
    "exact_defensive_weight",
    "exact_check_propriety",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Mle,
    Sampler(Method),
}

impl MethodChoice {
    fn as_str(&self) -> &'static str {
        match self {
            MethodChoice::Mle => "mle",
            MethodChoice::Sampler(m) => m.as_str(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub observations: PathBuf,
    pub calibration: PathBuf,
    pub methods: Vec<MethodChoice>,
    pub compare: bool,
    pub sampler: SamplerConfig,
    pub mode: ModeConfig,
    pub output: PathBuf,
    pub variance_default: DefaultVariancePrior,
    pub echo: BTreeMap<String, String>,
}

fn parse_method(s: &str) -> Result<(Vec<MethodChoice>, bool), CliError> {
    let one = |name: &str| -> Result<MethodChoice, CliError> {
        if name == "mle" {
            return Ok(MethodChoice::Mle);
        }
        name.parse::<Method>()
            .map(MethodChoice::Sampler)
            .map_err(|_| {
                CliError::Input(format!(
                    "key 'method': unknown method '{name}' (expected mle, vanilla-gibbs, block-gibbs, hmc, exact-iid or compare:<list>)"
                ))
            })
    };
    if let Some(list) = s.strip_prefix("compare:") {
        let methods = list
            .split(',')
            .map(|m| one(m.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        if methods.len() < 2 {
            return Err(CliError::Input("key 'method': compare needs at least two methods".into()));
        }
        if methods.contains(&MethodChoice::Mle) {
            return Err(CliError::Input("key 'method': compare takes sampling methods only".into()));
        }
        for (k, m) in methods.iter().enumerate() {
            if methods[..k].contains(m) {
                return Err(CliError::Input(format!("key 'method': '{}' listed twice", m.as_str())));
            }
        }
        Ok((methods, true))
    } else {
        Ok((vec![one(s)?], false))
    }
}

impl RunConfig {
    /// Parses the config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, output_override: Option<&Path>) -> Result<Self, CliError> {
        let c = KeyValueConfig::parse(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        let cfg = |e: concordance::Error| CliError::Input(format!("config: {e}"));
        c.check_known(&KNOWN_KEYS).map_err(cfg)?;
        let path = |key: &str| -> Result<PathBuf, CliError> {
            let p: String = c.required(key).map_err(cfg)?;
            let p = base.join(p);
            if !p.is_file() {
                return Err(CliError::Input(format!("config: key '{key}': file {} does not exist", p.display())));
            }
            Ok(p)
        };
        let observations = path("observations")?;
        let calibration = path("calibration")?;
        let (methods, compare) = parse_method(c.get("method").unwrap_or("block-gibbs"))?;

        let iterations = c.parsed("iterations").map_err(cfg)?.unwrap_or(3000);
        let warmup = c.parsed("warmup").map_err(cfg)?.unwrap_or(1000);
        let seed = c.parsed("seed").map_err(cfg)?.unwrap_or(1);
        let mut sampler = SamplerConfig::new(Method::BlockGibbs, iterations, warmup, seed)
            .with_chains(c.parsed("chains").map_err(cfg)?.unwrap_or(4));
        if let Some(s) = c.parsed::<f64>("hmc_step_size").map_err(cfg)? {
            sampler.hmc.step_size = Some(s);
        }
        if let Some(s) = c.parsed("hmc_steps").map_err(cfg)? {
            sampler.hmc.leapfrog_steps = s;
        }
        if let Some(s) = c.parsed("hmc_target_accept").map_err(cfg)? {
            sampler.hmc.target_accept = s;
        }
        if let Some(s) = c.parsed("hmc_jitter").map_err(cfg)? {
            sampler.hmc.jitter = s;
        }
        if let Some(s) = c.parsed("exact_margin").map_err(cfg)? {
            sampler.exact.margin = s;
        }
        if let Some(s) = c.parsed("exact_max_proposals").map_err(cfg)? {
            sampler.exact.max_proposals = s;
        }
        if let Some(s) = c.parsed("exact_defensive_weight").map_err(cfg)? {
            sampler.exact.defensive_weight = s;
        }
        if let Some(s) = c.parsed("exact_check_propriety").map_err(cfg)? {
            sampler.exact.check_propriety = s;
        }
        if let Some(s) = c.get("exact_shape") {
            sampler.exact.shape = match s {
                "slice-matched" => EnvelopeShape::SliceMatched,
                "mode-conditional" => EnvelopeShape::ModeConditional,
                other => {
                    return Err(CliError::Input(format!(
                        "config: key 'exact_shape': expected slice-matched or mode-conditional, got '{other}'"
                    )))
                }
            };
        }
        sampler.validate().map_err(cfg)?;

        let mode = ModeConfig {
            tolerance: c.parsed("tolerance").map_err(cfg)?.unwrap_or(1e-8),
            max_iters: c.parsed("max_iters").map_err(cfg)?.unwrap_or(500),
            target: FitTarget::Posterior,
        };
        if !(mode.tolerance > 0.0) || mode.max_iters == 0 {
            return Err(CliError::Input("config: tolerance and max_iters must be positive".into()));
        }

        let variance_default = match c.get("variance_prior").unwrap_or("inverse-gamma") {
            "inverse-gamma" => DefaultVariancePrior::InverseGamma {
                shape: c.parsed("alpha").map_err(cfg)?.unwrap_or(2.0),
                scale: c.parsed("beta").map_err(cfg)?.unwrap_or(0.1),
            },
            "improper" => {
                if c.get("alpha").is_some() || c.get("beta").is_some() {
                    return Err(CliError::Input(
                        "config: alpha/beta do not apply to the improper variance prior".into(),
                    ));
                }
                DefaultVariancePrior::Improper
            }
            other => {
                return Err(CliError::Input(format!(
                    "config: key 'variance_prior': expected inverse-gamma or improper, got '{other}'"
                )))
            }
        };

        let output = match output_override {
            Some(p) => p.to_path_buf(),
            None => base.join(c.get("output").unwrap_or("out")),
        };
        let echo = c.keys().map(|k| (k.to_string(), c.get(k).unwrap_or_default().to_string())).collect();
        Ok(Self {
            observations,
            calibration,
            methods,
            compare,
            sampler,
            mode,
            output,
            variance_default,
            echo,
        })
    }
}

#[derive(Debug, Serialize)]
struct ModeInfo {
    iterations: usize,
    converged: bool,
    at_variance_floor: Vec<bool>,
    log_posterior: f64,
}

#[derive(Debug, Serialize)]
struct ChainInfo {
    chain: u32,
    rng_stream: u64,
    #[serde(flatten)]
    stats: ChainStats,
}

#[derive(Debug, Serialize)]
struct MethodReport {
    method: &'static str,
    runtime_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<ModeInfo>,
    chains: Vec<ChainInfo>,
    max_rhat: Option<f64>,
    min_ess: Option<f64>,
    rhat_warning: bool,
}

#[derive(Debug, Serialize)]
struct AgreementBlock {
    a: &'static str,
    b: &'static str,
    verdict: &'static str,
    #[serde(flatten)]
    report: AgreementReport,
}

#[derive(Debug, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Inputs {
    observations: InputHash,
    calibration: InputHash,
    config: InputHash,
    /// Hash over all three inputs; identical inputs give identical runs.
    content_sha256: String,
}

#[derive(Debug, Serialize)]
struct Seeds {
    master: u64,
    chains: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    command: &'static str,
    version: &'static str,
    status: &'static str,
    warnings: Vec<String>,
    config: BTreeMap<String, String>,
    inputs: Inputs,
    seeds: Seeds,
    ids: IdMap,
    runtime_seconds: f64,
    methods: Vec<MethodReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    agreement: Vec<AgreementBlock>,
}

pub struct RunFlags {
    pub draws: bool,
    pub plot_data: bool,
}

enum Outcome {
    Mode(Model, concordance::ModeFitResult),
    Draws(Vec<DrawSequence>),
}

fn mode_lines(fit: &concordance::ModeFitResult) -> Vec<SummaryLine> {
    let s = &fit.state;
    let (n, m) = (s.n_instruments(), s.n_sources());
    let mut q: Vec<(Quantity, f64)> = Vec::new();
    q.extend((0..n).map(|i| (Quantity::LogArea(i), s.log_area[i])));
    q.extend((0..m).map(|j| (Quantity::LogFlux(j), s.log_flux[j])));
    q.extend((0..n).map(|i| (Quantity::Variance(i), s.variance[i])));
    q.extend((0..n).map(|i| (Quantity::Area(i), s.log_area[i].exp())));
    q.extend((0..m).map(|j| (Quantity::Flux(j), s.log_flux[j].exp())));
    q.into_iter().map(|(q, x)| SummaryLine::point(q, x)).collect()
}

/// Executes a run and writes every output file. Returns the report status.
pub fn execute(config_path: &Path, config_text: &str, cfg: &RunConfig, flags: &RunFlags) -> Result<&'static str, CliError> {
    let start = Instant::now();
    let data = ingest(&cfg.observations, &cfg.calibration, cfg.variance_default)?;
    let model = Model::new(log_transform(&data.table), data.prior.clone()).map_err(core_error)?;
    let registry = SamplerRegistry::with_defaults();

    let mut warnings = Vec::new();
    let mut results: Vec<(MethodChoice, Outcome, f64)> = Vec::new();
    for &choice in &cfg.methods {
        let t = Instant::now();
        let outcome = match choice {
            MethodChoice::Mle => {
                let fit = fit_mode(&model, &cfg.mode).map_err(core_error)?;
                if !fit.converged {
                    warnings.push(format!("mle: not converged after {} sweeps", fit.iterations));
                }
                Outcome::Mode(model.clone(), fit)
            }
            MethodChoice::Sampler(m) => {
                let mut sc = cfg.sampler.clone();
                sc.method = m;
                if !model.prior.variance_priors_proper() && m != Method::ExactIid {
                    warnings.push(format!(
                        "{m}: improper variance prior; the posterior may be improper and the draws meaningless"
                    ));
                }
                Outcome::Draws(registry.run(&model, &sc).map_err(core_error)?)
            }
        };
        results.push((choice, outcome, t.elapsed().as_secs_f64()));
    }

    let mut method_reports = Vec::new();
    let mut summaries: Vec<(MethodChoice, Vec<SummaryLine>)> = Vec::new();
    for (choice, outcome, secs) in &results {
        match outcome {
            Outcome::Mode(model, fit) => {
                method_reports.push(MethodReport {
                    method: choice.as_str(),
                    runtime_seconds: *secs,
                    mode: Some(ModeInfo {
                        iterations: fit.iterations,
                        converged: fit.converged,
                        at_variance_floor: fit.boundary.clone(),
                        log_posterior: concordance::estimators::mode_objective(model, &fit.state, FitTarget::Posterior),
                    }),
                    chains: Vec::new(),
                    max_rhat: None,
                    min_ess: None,
                    rhat_warning: false,
                });
                summaries.push((*choice, mode_lines(fit)));
            }
            Outcome::Draws(seqs) => {
                let table = summarize(seqs).map_err(core_error)?;
                let max_rhat = table.max_rhat();
                let min_ess = table.rows.iter().map(|r| r.ess).fold(f64::INFINITY, f64::min);
                let warn = !(max_rhat <= RHAT_WARN);
                if warn {
                    warnings.push(format!("{}: max R-hat {max_rhat:.4} exceeds {RHAT_WARN}", choice.as_str()));
                }
                for s in seqs {
                    for w in &s.stats.warnings {
                        warnings.push(format!("{} chain {}: {w}", choice.as_str(), s.chain));
                    }
                }
                method_reports.push(MethodReport {
                    method: choice.as_str(),
                    runtime_seconds: *secs,
                    mode: None,
                    chains: seqs
                        .iter()
                        .map(|s| ChainInfo {
                            chain: s.chain,
                            rng_stream: u64::from(s.chain) + 1,
                            stats: s.stats.clone(),
                        })
                        .collect(),
                    max_rhat: Some(max_rhat),
                    min_ess: Some(min_ess),
                    rhat_warning: warn,
                });
                summaries.push((*choice, table.rows.iter().map(SummaryLine::from).collect()));
            }
        }
    }

    let mut agreement = Vec::new();
    if cfg.compare {
        for x in 0..results.len() {
            for y in x + 1..results.len() {
                let (Outcome::Draws(a), Outcome::Draws(b)) = (&results[x].1, &results[y].1) else {
                    continue;
                };
                let report = agreement_report(a, b).map_err(core_error)?;
                agreement.push(AgreementBlock {
                    a: results[x].0.as_str(),
                    b: results[y].0.as_str(),
                    verdict: if report.pass { "PASS" } else { "FAIL" },
                    report,
                });
            }
        }
    }

    let obs_bytes = read_bytes(&cfg.observations)?;
    let cal_bytes = read_bytes(&cfg.calibration)?;
    let inputs = Inputs {
        observations: InputHash {
            path: cfg.observations.display().to_string(),
            sha256: output::sha256_hex(&[&obs_bytes]),
        },
        calibration: InputHash {
            path: cfg.calibration.display().to_string(),
            sha256: output::sha256_hex(&[&cal_bytes]),
        },
        config: InputHash {
            path: config_path.display().to_string(),
            sha256: output::sha256_hex(&[config_text.as_bytes()]),
        },
        content_sha256: output::sha256_hex(&[&obs_bytes, b"\0", &cal_bytes, b"\0", config_text.as_bytes()]),
    };
    let status = if warnings.is_empty() { "OK" } else { "WARN" };
    let report = Report {
        command: "run",
        version: env!("CARGO_PKG_VERSION"),
        status,
        warnings,
        config: cfg.echo.clone(),
        inputs,
        seeds: Seeds {
            master: cfg.sampler.seed,
            chains: cfg.sampler.chains,
        },
        ids: data.ids.clone(),
        runtime_seconds: start.elapsed().as_secs_f64(),
        methods: method_reports,
        agreement,
    };

    // All computation is done; write outputs.
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
    for (k, (choice, lines)) in summaries.iter().enumerate() {
        if k == 0 {
            output::write_summary(&out.join("summary.csv"), lines)?;
        }
        if cfg.compare {
            output::write_summary(&out.join(format!("summary.{}.csv", choice.as_str())), lines)?;
        }
    }
    for (choice, outcome, _) in &results {
        let Outcome::Draws(seqs) = outcome else { continue };
        let suffix = if cfg.compare { format!(".{}", choice.as_str()) } else { String::new() };
        if flags.draws {
            output::write_draws(&out.join(format!("draws{suffix}.csv")), seqs)?;
        }
        if flags.plot_data {
            output::write_histograms(&out.join("plots").join(choice.as_str()), seqs)?;
        }
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    output::write_file(&out.join("report.json"), format!("{json}\n").as_bytes())?;
    if status == "WARN" {
        for w in &report.warnings {
            eprintln!("WARN: {w}");
        }
    }
    Ok(status)
}

fn read_bytes(p: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
}
