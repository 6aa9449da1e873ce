//! The `simulate` command: a truth-spec config in, observations and truth out.

use std::path::Path;

use concordance::config::KeyValueConfig;
use concordance::synth::{simulate, TruthSpec};
use serde::Serialize;

use crate::output::write_file;
use crate::{core_error, CliError};

#[derive(Debug, Serialize)]
struct Truth<'a> {
    seed: u64,
    instruments: Vec<String>,
    sources: Vec<String>,
    spec: &'a TruthSpec,
    warnings: &'a [String],
}

pub fn instrument_id(i: usize) -> String {
    format!("I{}", i + 1)
}

pub fn source_id(j: usize) -> String {
    format!("S{}", j + 1)
}

/// Writes `observations.csv`, `truth.json` and a `calibration.csv` that
/// centres each instrument's prior on its true area with spread `tau`.
pub fn execute(config_text: &str, seed: Option<u64>, tau: f64, out: &Path) -> Result<Vec<String>, CliError> {
    let c = KeyValueConfig::parse(config_text).map_err(|e| CliError::Input(format!("config: {e}")))?;
    let spec = TruthSpec::from_config(&c).map_err(|e| CliError::Input(format!("config: {e}")))?;
    let seed = match seed {
        Some(s) => s,
        None => c
            .parsed("seed")
            .map_err(|e| CliError::Input(format!("config: {e}")))?
            .unwrap_or(1),
    };
    if !(tau > 0.0) {
        return Err(CliError::Input(format!("calibration tau must be positive, got {tau}")));
    }
    let sim = simulate(&spec, seed).map_err(core_error)?;

    let mut obs = String::from("instrument,source,count,adjustment\n");
    for e in sim.table.entries() {
        obs.push_str(&format!(
            "{},{},{},{}\n",
            instrument_id(e.instrument),
            source_id(e.source),
            e.count,
            e.adjustment
        ));
    }
    let mut cal = String::from("instrument,a,tau\n");
    for (i, a) in spec.area.iter().enumerate() {
        cal.push_str(&format!("{},{a},{tau}\n", instrument_id(i)));
    }
    let truth = Truth {
        seed,
        instruments: (0..spec.n_instruments()).map(instrument_id).collect(),
        sources: (0..spec.n_sources()).map(source_id).collect(),
        spec: &spec,
        warnings: &sim.warnings,
    };
    let json = serde_json::to_string_pretty(&truth).map_err(|e| CliError::Runtime(e.to_string()))?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
    write_file(&out.join("observations.csv"), obs.as_bytes())?;
    write_file(&out.join("calibration.csv"), cal.as_bytes())?;
    write_file(&out.join("truth.json"), format!("{json}\n").as_bytes())?;
    Ok(sim.warnings)
}
