#![allow(dead_code)]

use concordance::domain::log_transform;
use concordance::synth::{gen_lognormal, Regime, TruthSpec};
use concordance::{CalibrationPrior, InstrumentPrior, Model};

pub const AREA: [f64; 3] = [2.0, 1.0, 0.5];
pub const FLUX: [f64; 5] = [10.0, 20.0, 40.0, 80.0, 160.0];
pub const VARIANCE: [f64; 3] = [0.02, 0.05, 0.1];

/// Seeded three-instrument, five-source log-normal instance.
pub fn instance_3x5() -> Model {
    let spec = TruthSpec::complete(
        AREA.to_vec(),
        FLUX.to_vec(),
        1.0,
        Regime::Lognormal { variance: VARIANCE.to_vec() },
    )
    .unwrap();
    let table = gen_lognormal(&spec, 2024).unwrap().table;
    let prior = CalibrationPrior::new(
        vec![
            InstrumentPrior::from_estimate(2.2, 0.1),
            InstrumentPrior::from_estimate(0.9, 0.2),
            InstrumentPrior::from_estimate(0.5, 0.3),
        ],
        5,
    );
    Model::new(log_transform(&table), prior).unwrap()
}
