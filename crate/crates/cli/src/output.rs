//! File writers. Numbers use the shortest round-trip decimal form so output
//! bytes depend only on the values.

use std::path::Path;

use concordance::diagnostics::{ParameterSummary, Quantity};
use concordance::domain::DrawSequence;
use sha2::{Digest, Sha256};

use crate::CliError;

const SUMMARY_HEADER: &str = "name,scale,mean,sd,q2.5,q50,q97.5,ess,rhat";
const HISTOGRAM_BINS: usize = 40;

/// One summary.csv row; point estimates leave the interval columns blank.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryLine {
    pub name: String,
    pub scale: &'static str,
    pub mean: f64,
    pub rest: Option<[f64; 6]>,
}

impl SummaryLine {
    pub fn point(q: Quantity, value: f64) -> Self {
        Self {
            name: q.label(),
            scale: q.scale().as_str(),
            mean: value,
            rest: None,
        }
    }
}

impl From<&ParameterSummary> for SummaryLine {
    fn from(r: &ParameterSummary) -> Self {
        Self {
            name: r.name.clone(),
            scale: r.scale.as_str(),
            mean: r.mean,
            rest: Some([r.sd, r.q025, r.q50, r.q975, r.ess, r.rhat]),
        }
    }
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "NaN".into()
    }
}

pub fn write_summary(path: &Path, lines: &[SummaryLine]) -> Result<(), CliError> {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for l in lines {
        s.push_str(&format!("{},{},{}", l.name, l.scale, num(l.mean)));
        match l.rest {
            Some(rest) => rest.iter().for_each(|x| s.push_str(&format!(",{}", num(*x)))),
            None => s.push_str(",,,,,,"),
        }
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

fn labels(seq: &DrawSequence) -> Vec<String> {
    let d = &seq.draws[0];
    (0..d.n_instruments())
        .map(|i| Quantity::LogArea(i).label())
        .chain((0..d.n_sources()).map(|j| Quantity::LogFlux(j).label()))
        .chain((0..d.n_instruments()).map(|i| Quantity::Variance(i).label()))
        .collect()
}

pub fn write_draws(path: &Path, seqs: &[DrawSequence]) -> Result<(), CliError> {
    let mut s = format!("chain,draw,{}\n", labels(&seqs[0]).join(","));
    for seq in seqs {
        for (k, d) in seq.draws.iter().enumerate() {
            s.push_str(&format!("{},{k}", seq.chain));
            for x in d.to_vec() {
                s.push_str(&format!(",{}", num(x)));
            }
            s.push('\n');
        }
    }
    write_file(path, s.as_bytes())
}

/// Per-parameter histogram CSVs (`bin_lo,bin_hi,count,density`) of pooled draws,
/// on the log and natural scales.
pub fn write_histograms(dir: &Path, seqs: &[DrawSequence]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    let d = &seqs[0].draws[0];
    let (n, m) = (d.n_instruments(), d.n_sources());
    let mut quantities: Vec<(Quantity, usize, bool)> = Vec::new();
    quantities.extend((0..n).map(|i| (Quantity::LogArea(i), i, false)));
    quantities.extend((0..m).map(|j| (Quantity::LogFlux(j), n + j, false)));
    quantities.extend((0..n).map(|i| (Quantity::Variance(i), n + m + i, false)));
    quantities.extend((0..n).map(|i| (Quantity::Area(i), i, true)));
    quantities.extend((0..m).map(|j| (Quantity::Flux(j), n + j, true)));
    for (q, k, exp) in quantities {
        let x: Vec<f64> = seqs
            .iter()
            .flat_map(|s| s.draws.iter().map(move |d| d.to_vec()[k]))
            .map(|v| if exp { v.exp() } else { v })
            .collect();
        let file: String = q
            .label()
            .chars()
            .filter_map(|c| match c {
                '[' => Some('_'),
                ']' => None,
                c => Some(c),
            })
            .collect();
        write_file(&dir.join(format!("{file}.csv")), histogram(&x).as_bytes())?;
    }
    Ok(())
}

fn histogram(x: &[f64]) -> String {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = String::from("bin_lo,bin_hi,count,density\n");
    if !(hi > lo) {
        s.push_str(&format!("{},{},{},NaN\n", num(lo), num(hi), x.len()));
        return s;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut counts = [0usize; HISTOGRAM_BINS];
    for &v in x {
        let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[b] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        let a = lo + b as f64 * width;
        let density = *c as f64 / (x.len() as f64 * width);
        s.push_str(&format!("{},{},{c},{}\n", num(a), num(a + width), num(density)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_mass_sums_to_one() {
        let x: Vec<f64> = (0..1000).map(|k| (k as f64 * 0.37).sin()).collect();
        let h = histogram(&x);
        let mut mass = 0.0;
        let mut total = 0;
        for line in h.lines().skip(1) {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            mass += f[3] * (f[1] - f[0]);
            total += f[2] as usize;
        }
        assert_eq!(total, 1000);
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_rows_leave_columns_blank() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("s.csv");
        write_summary(&p, &[SummaryLine::point(Quantity::Area(0), 2.5)]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, format!("{SUMMARY_HEADER}\narea[0],natural,2.5,,,,,,\n"));
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            sha256_hex(&[b"abc"]),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(sha256_hex(&[b"a", b"bc"]), sha256_hex(&[b"abc"]));
    }
}
