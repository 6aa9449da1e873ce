use concordance::domain::{log_transform, Entry, ObservationTable};
use concordance::estimators::{fit_mode, ModeConfig};
use concordance::synth::{apply_pileup, gen_lognormal, gen_poisson, simulate, Regime, TruthSpec};
use concordance::{CalibrationPrior, InstrumentPrior, Model};

#[test]
fn lognormal_counts_are_unbiased_on_the_natural_scale() {
    let n = 100_000;
    let spec = TruthSpec::complete(vec![2.0], vec![3.0; n], 1.0, Regime::Lognormal { variance: vec![0.4] }).unwrap();
    let table = gen_lognormal(&spec, 77).unwrap().table;
    let ratios: Vec<f64> = table.entries().iter().map(|e| e.count / e.adjustment).collect();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let sd = 6.0 * (0.4f64.exp() - 1.0).sqrt();
    assert!((mean - 6.0).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean}");
    // The log-scale mean carries the half-variance offset.
    let log_mean = ratios.iter().map(|r| r.ln()).sum::<f64>() / n as f64;
    assert!((log_mean - (6.0f64.ln() - 0.2)).abs() < 0.01);
}

#[test]
fn pileup_survival_at_the_reference_count() {
    let c = 1e6;
    let entries: Vec<Entry> = (0..20)
        .map(|j| Entry { instrument: 0, source: j, count: c, adjustment: 1.0 })
        .collect();
    let table = ObservationTable::new(1, 20, entries).unwrap();
    let lambda = 0.7;
    let out = apply_pileup(&table, lambda, c, 3).unwrap();
    assert!(out.warnings.is_empty());
    let p = (-lambda).exp();
    let se = (p * (1.0 - p) / c).sqrt();
    for e in out.table.entries() {
        assert!((e.count / c - p).abs() < 5.0 * se, "{}", e.count / c);
    }
    let none = apply_pileup(&table, 0.0, c, 3).unwrap();
    assert_eq!(none.table, table);
}

fn bias_of_bright_instrument(strength: f64) -> f64 {
    let area = [10.0, 1.0, 1.0];
    let flux = [50.0, 80.0, 100.0, 120.0];
    let prior = CalibrationPrior::new(
        vec![
            InstrumentPrior::from_estimate(10.0, 2.0),
            InstrumentPrior::from_estimate(1.0, 0.01),
            InstrumentPrior::from_estimate(1.0, 0.01),
        ],
        flux.len(),
    );
    let reps = 100;
    let mut total = 0.0;
    for r in 0..reps {
        let spec = TruthSpec::complete(
            area.to_vec(),
            flux.to_vec(),
            1.0,
            Regime::Pileup { strength, scale: 1000.0 },
        )
        .unwrap();
        let table = simulate(&spec, 1000 + r).unwrap().table;
        let model = Model::new(log_transform(&table), prior.clone()).unwrap();
        let fit = fit_mode(&model, &ModeConfig::default()).unwrap();
        total += fit.state.log_area[0] - area[0].ln();
    }
    total / reps as f64
}

#[test]
fn pileup_biases_the_bright_instrument_downward() {
    let clean = bias_of_bright_instrument(0.0);
    let piled = bias_of_bright_instrument(0.5);
    assert!(clean.abs() < 0.05, "{clean}");
    assert!(piled < -0.2, "{piled}");
}

#[test]
fn seeds_give_reproducible_distinct_tables() {
    let spec = TruthSpec::complete(vec![1.0, 2.0], vec![30.0, 60.0, 90.0], 2.0, Regime::Poisson).unwrap();
    let a = gen_poisson(&spec, 1).unwrap();
    let b = gen_poisson(&spec, 1).unwrap();
    let c = gen_poisson(&spec, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.table, c.table);
    assert_eq!(a.table.entries().len(), 6);
}

#[test]
fn config_round_trip_preserves_the_truth() {
    let mut spec = TruthSpec::complete(vec![1.5, 0.5], vec![4.0, 8.0], 3.0, Regime::Pileup { strength: 0.2, scale: 50.0 }).unwrap();
    spec.adjustment.retain(|&(i, j, _)| (i, j) != (1, 0));
    let back = TruthSpec::from_config(&spec.to_config()).unwrap();
    assert_eq!(back, spec);
}
