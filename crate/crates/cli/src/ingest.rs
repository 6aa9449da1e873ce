//! Reading `observations.csv` and `calibration.csv` into domain objects.

use std::collections::HashMap;
use std::path::Path;

use concordance::domain::{Entry, ObservationTable};
use concordance::{CalibrationPrior, InstrumentPrior, NormalPrior, VariancePrior};
use serde::Serialize;

use crate::CliError;

const OBSERVATION_COLUMNS: [&str; 4] = ["instrument", "source", "count", "adjustment"];
const CALIBRATION_COLUMNS: [&str; 5] = ["instrument", "a", "tau", "alpha", "beta"];

/// String identifiers in order of first appearance in the observations file.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IdMap {
    pub instruments: Vec<String>,
    pub sources: Vec<String>,
}

impl IdMap {
    fn index(ids: &mut Vec<String>, lookup: &mut HashMap<String, usize>, id: &str) -> usize {
        *lookup.entry(id.to_string()).or_insert_with(|| {
            ids.push(id.to_string());
            ids.len() - 1
        })
    }
}

/// Variance prior used for calibration rows that leave alpha/beta blank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefaultVariancePrior {
    InverseGamma { shape: f64, scale: f64 },
    Improper,
}

pub struct Ingested {
    pub table: ObservationTable,
    pub prior: CalibrationPrior,
    pub ids: IdMap,
}

struct Located<'a> {
    file: &'a str,
    row: u64,
}

impl Located<'_> {
    fn error(&self, column: &str, message: impl std::fmt::Display) -> CliError {
        CliError::Input(format!("{}: row {}, column '{column}': {message}", self.file, self.row))
    }

    fn row_error(&self, message: impl std::fmt::Display) -> CliError {
        CliError::Input(format!("{}: row {}: {message}", self.file, self.row))
    }

    fn positive(&self, column: &str, raw: &str) -> Result<f64, CliError> {
        match raw.parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
            Ok(_) => Err(self.error(column, format!("expected a positive finite number, got '{raw}'"))),
            Err(_) => Err(self.error(column, format!("cannot parse '{raw}' as a number"))),
        }
    }

    /// Positive number; `inf` is allowed and means no prior information.
    fn spread(&self, column: &str, raw: &str) -> Result<f64, CliError> {
        match raw.parse::<f64>() {
            Ok(x) if x > 0.0 => Ok(x),
            Ok(_) => Err(self.error(column, format!("expected a positive number or inf, got '{raw}'"))),
            Err(_) => Err(self.error(column, format!("cannot parse '{raw}' as a number"))),
        }
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn header(rdr: &mut csv::Reader<std::fs::File>, file: &str) -> Result<Vec<String>, CliError> {
    let h = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{file}: row 1: {e}")))?;
    Ok(h.iter().map(str::to_string).collect())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn ingest(
    observations: &Path,
    calibration: &Path,
    default_variance: DefaultVariancePrior,
) -> Result<Ingested, CliError> {
    let (table, ids) = read_observations(observations)?;
    let prior = read_calibration(calibration, &ids, default_variance)?;
    Ok(Ingested { table, prior, ids })
}

fn read_observations(path: &Path) -> Result<(ObservationTable, IdMap), CliError> {
    let file = file_name(path);
    let mut rdr = reader(path)?;
    let cols = header(&mut rdr, &file)?;
    if cols != OBSERVATION_COLUMNS {
        return Err(CliError::Input(format!(
            "{file}: row 1: header must be '{}', got '{}'",
            OBSERVATION_COLUMNS.join(","),
            cols.join(",")
        )));
    }
    let mut ids = IdMap::default();
    let mut inst_lookup = HashMap::new();
    let mut src_lookup = HashMap::new();
    let mut seen: HashMap<(usize, usize), u64> = HashMap::new();
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Input(format!("{file}: {e}")))?;
        let at = Located {
            file: &file,
            row: rec.position().map_or(0, |p| p.line()),
        };
        if rec.len() != OBSERVATION_COLUMNS.len() {
            return Err(at.row_error(format!(
                "expected {} fields, found {}",
                OBSERVATION_COLUMNS.len(),
                rec.len()
            )));
        }
        let (inst, src) = (&rec[0], &rec[1]);
        if inst.is_empty() {
            return Err(at.error("instrument", "empty identifier"));
        }
        if src.is_empty() {
            return Err(at.error("source", "empty identifier"));
        }
        let count = at.positive("count", &rec[2])?;
        let adjustment = at.positive("adjustment", &rec[3])?;
        let i = IdMap::index(&mut ids.instruments, &mut inst_lookup, inst);
        let j = IdMap::index(&mut ids.sources, &mut src_lookup, src);
        if let Some(first) = seen.insert((i, j), at.row) {
            return Err(at.row_error(format!(
                "duplicate pair ({inst}, {src}); first given on row {first}"
            )));
        }
        entries.push(Entry {
            instrument: i,
            source: j,
            count,
            adjustment,
        });
    }
    if entries.is_empty() {
        return Err(CliError::Input(format!("{file}: no observation rows")));
    }
    let table = ObservationTable::new(ids.instruments.len(), ids.sources.len(), entries)
        .map_err(|e| CliError::Input(format!("{file}: {e}")))?;
    Ok((table, ids))
}

fn read_calibration(
    path: &Path,
    ids: &IdMap,
    default_variance: DefaultVariancePrior,
) -> Result<CalibrationPrior, CliError> {
    let file = file_name(path);
    let mut rdr = reader(path)?;
    let cols = header(&mut rdr, &file)?;
    let width = cols.len();
    if !(width == 3 || width == 5) || cols[..] != CALIBRATION_COLUMNS[..width] {
        return Err(CliError::Input(format!(
            "{file}: row 1: header must be 'instrument,a,tau' or 'instrument,a,tau,alpha,beta', got '{}'",
            cols.join(",")
        )));
    }
    let mut rows: Vec<Option<(InstrumentPrior, u64)>> = vec![None; ids.instruments.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Input(format!("{file}: {e}")))?;
        let at = Located {
            file: &file,
            row: rec.position().map_or(0, |p| p.line()),
        };
        if rec.len() != width {
            return Err(at.row_error(format!("expected {width} fields, found {}", rec.len())));
        }
        let id = &rec[0];
        let Some(i) = ids.instruments.iter().position(|x| x == id) else {
            return Err(at.error("instrument", format!("unknown instrument '{id}' (not in the observations)")));
        };
        if let Some((_, first)) = rows[i] {
            return Err(at.row_error(format!(
                "duplicate calibration for instrument '{id}'; first given on row {first}"
            )));
        }
        let a = at.positive("a", &rec[1])?;
        let tau = at.spread("tau", &rec[2])?;
        let variance = if width == 5 && !(rec[3].is_empty() && rec[4].is_empty()) {
            if rec[3].is_empty() || rec[4].is_empty() {
                return Err(at.row_error("alpha and beta must both be given or both be blank"));
            }
            VariancePrior::InverseGamma {
                shape: at.positive("alpha", &rec[3])?,
                scale: at.positive("beta", &rec[4])?,
            }
        } else {
            match default_variance {
                DefaultVariancePrior::InverseGamma { shape, scale } => {
                    VariancePrior::InverseGamma { shape, scale }
                }
                DefaultVariancePrior::Improper => VariancePrior::Improper,
            }
        };
        rows[i] = Some((
            InstrumentPrior {
                log_area: NormalPrior::new(a.ln(), tau),
                variance,
            },
            at.row,
        ));
    }
    let instruments = rows
        .into_iter()
        .zip(&ids.instruments)
        .map(|(r, id)| {
            r.map(|(p, _)| p)
                .ok_or_else(|| CliError::Input(format!("{file}: no calibration row for instrument '{id}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CalibrationPrior::new(instruments, ids.sources.len()))
}
