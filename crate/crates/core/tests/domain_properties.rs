use concordance::domain::{
    hvc_mean, log_likelihood, log_posterior, log_posterior_gradient, log_prior, LogScaleData,
};
use concordance::{CalibrationPrior, InstrumentPrior, NormalPrior, ParameterState, VariancePrior};
use proptest::prelude::*;

fn complete(n: usize, m: usize, ys: &[f64]) -> LogScaleData {
    let cells = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).zip(ys).map(|((i, j), &y)| (i, j, y));
    LogScaleData::from_cells(n, m, cells).unwrap()
}

fn state_strategy(n: usize, m: usize) -> impl Strategy<Value = ParameterState> {
    (
        prop::collection::vec(-3.0..3.0f64, n),
        prop::collection::vec(-3.0..3.0f64, m),
        prop::collection::vec(0.01..2.0f64, n),
    )
        .prop_map(|(b, g, v)| ParameterState::new(b, g, v).unwrap())
}

fn instance() -> impl Strategy<Value = (LogScaleData, ParameterState, CalibrationPrior)> {
    (1usize..4, 1usize..5).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(-4.0..4.0f64, n * m),
            state_strategy(n, m),
            prop::collection::vec((-1.0..1.0f64, 0.05..2.0f64), n),
            prop::collection::vec((1.0..5.0f64, 0.05..1.0f64), n),
        )
            .prop_map(move |(ys, s, bp, vp)| {
                let prior = CalibrationPrior::new(
                    bp.iter()
                        .zip(&vp)
                        .map(|(&(loc, sd), &(a, b))| InstrumentPrior {
                            log_area: NormalPrior::new(loc, sd),
                            variance: VariancePrior::InverseGamma { shape: a, scale: b },
                        })
                        .collect(),
                    m,
                );
                (complete(n, m, &ys), s, prior)
            })
    })
}

proptest! {
    #[test]
    fn hvc_mean_restores_the_sum(b in -50.0..50.0f64, g in -50.0..50.0f64, v in 0.0..100.0f64) {
        let lhs = hvc_mean(b, g, v) + v / 2.0;
        prop_assert!((lhs - (b + g)).abs() <= 4.0 * f64::EPSILON * (b.abs() + g.abs() + v));
    }

    #[test]
    fn likelihood_is_exchangeable_over_entries((data, state, _p) in instance()) {
        let ll = log_likelihood(&state, &data).unwrap();
        let mut cells: Vec<_> = data.entries().iter().map(|e| (e.instrument, e.source, e.y)).collect();
        cells.reverse();
        let shuffled = LogScaleData::from_cells(data.n_instruments(), data.n_sources(), cells).unwrap();
        let ll2 = log_likelihood(&state, &shuffled).unwrap();
        prop_assert!((ll - ll2).abs() <= 1e-10 * (1.0 + ll.abs()));
    }

    #[test]
    fn common_shift_leaves_likelihood_unchanged((data, state, prior) in instance(), delta in -2.0..2.0f64) {
        let mut shifted = state.clone();
        for b in &mut shifted.log_area { *b += delta; }
        for g in &mut shifted.log_flux { *g -= delta; }
        let ll = log_likelihood(&state, &data).unwrap();
        let ll2 = log_likelihood(&shifted, &data).unwrap();
        prop_assert!((ll - ll2).abs() <= 1e-9 * (1.0 + ll.abs()));
        // With finite spreads the posterior moves by exactly the prior difference.
        let dp = log_prior(&shifted, &prior) - log_prior(&state, &prior);
        let dpost = log_posterior(&shifted, &data, &prior).unwrap() - log_posterior(&state, &data, &prior).unwrap();
        prop_assert!((dpost - dp).abs() <= 1e-8 * (1.0 + ll.abs()));
        if delta.abs() > 1e-3 {
            prop_assert!(dp != 0.0);
        }
    }

    #[test]
    fn gradient_matches_central_differences((data, state, prior) in instance()) {
        let g = log_posterior_gradient(&state, &data, &prior).unwrap();
        let analytic: Vec<f64> = g.log_area.iter().chain(&g.log_flux).chain(&g.variance).copied().collect();
        let x = state.to_vec();
        let (n, m) = (state.n_instruments(), state.n_sources());
        let f = |x: &[f64]| {
            let s = ParameterState::new(x[..n].to_vec(), x[n..n + m].to_vec(), x[n + m..].to_vec()).unwrap();
            log_posterior(&s, &data, &prior).unwrap()
        };
        for k in 0..x.len() {
            let h = 1e-6 * (1.0 + x[k].abs());
            let h = if k >= n + m { h.min(x[k] / 4.0) } else { h };
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let scale = 1.0 + analytic[k].abs();
            prop_assert!((fd - analytic[k]).abs() / scale < 1e-4, "coordinate {k}: {fd} vs {}", analytic[k]);
        }
    }
}

#[test]
fn likelihood_tends_to_minus_infinity_at_the_boundaries() {
    let data = complete(1, 2, &[0.3, -0.4]);
    let at = |v: f64| log_likelihood(&ParameterState::new(vec![0.0], vec![0.0, 0.0], vec![v]).unwrap(), &data).unwrap();
    assert!(at(1e-12) < -1e10);
    assert!(at(1e12) < -1e10);
    let far = ParameterState::new(vec![1e6], vec![0.0, 0.0], vec![1.0]).unwrap();
    assert!(log_likelihood(&far, &data).unwrap() < -1e11);
}
