use concordance::diagnostics::{agreement_report, summarize, Quantity};
use concordance::domain::{ChainStats, DrawSequence, Method};
use concordance::samplers::chain_rng;
use concordance::ParameterState;
use rand::Rng;
use rand_distr::StandardNormal;

fn sequence(chain: u32, draws: Vec<ParameterState>) -> DrawSequence {
    DrawSequence::new(Method::ExactIid, chain, 0, 0, draws, ChainStats::default()).unwrap()
}

fn iid_normal(seed: u64, chain: u32, n: usize, shift: f64) -> DrawSequence {
    let mut rng = chain_rng(seed, chain);
    let draws = (0..n)
        .map(|_| {
            let b: f64 = rng.sample(StandardNormal);
            let g: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.sample(StandardNormal);
            ParameterState::new(vec![b + shift], vec![g], vec![(0.3 * u).exp()]).unwrap()
        })
        .collect();
    sequence(chain, draws)
}

#[test]
fn constant_draws_have_zero_spread() {
    let s = ParameterState::new(vec![0.4], vec![1.5, -2.0], vec![0.25]).unwrap();
    let t = summarize(&[sequence(0, vec![s; 500])]).unwrap();
    for r in &t.rows {
        assert_eq!(r.sd, 0.0, "{}", r.name);
        assert_eq!(r.q025, r.q50);
        assert_eq!(r.q50, r.q975);
        assert_eq!(r.mcse, 0.0);
        assert_eq!(r.ess, 500.0);
    }
    assert!((t.get(Quantity::Area(0)).unwrap().mean - 0.4f64.exp()).abs() < 1e-13);
}

#[test]
fn natural_scale_summaries_average_exponentiated_draws() {
    let seq = iid_normal(1, 0, 50_001, 0.0);
    let t = summarize(std::slice::from_ref(&seq)).unwrap();
    let direct = seq.draws.iter().map(|d| d.log_area[0].exp()).sum::<f64>() / seq.len() as f64;
    let area = t.get(Quantity::Area(0)).unwrap();
    let log_area = t.get(Quantity::LogArea(0)).unwrap();
    assert!((area.mean - direct).abs() < 1e-12 * direct);
    // E[exp B] = exp(1/2) for a standard normal, well above exp(E[B]) = 1.
    assert!((area.mean - 0.5f64.exp()).abs() < 0.03);
    assert!(area.mean > log_area.mean.exp() + 0.5);
    assert!((area.q50 - log_area.q50.exp()).abs() < 1e-12);
}

#[test]
fn standard_normal_summary() {
    let seqs: Vec<_> = (0..2).map(|c| iid_normal(2, c, 50_000, 0.0)).collect();
    let t = summarize(&seqs).unwrap();
    let r = t.get(Quantity::LogArea(0)).unwrap();
    assert_eq!(t.total_draws, 100_000);
    assert!(r.mean.abs() < 0.015);
    assert!((r.sd - 1.0).abs() < 0.01);
    assert!((r.q025 + 1.959964).abs() < 0.03);
    assert!((r.q975 - 1.959964).abs() < 0.03);
    assert!(r.q50.abs() < 0.02);
    assert!(r.ess > 80_000.0 && r.ess <= 100_000.0);
    assert!((r.rhat - 1.0).abs() < 0.01);
    assert!((r.mcse - r.sd / r.ess.sqrt()).abs() < 1e-15);
}

#[test]
fn agreement_separates_equal_and_shifted_laws() {
    let a: Vec<_> = (0..2).map(|c| iid_normal(3, c, 5_000, 0.0)).collect();
    let b: Vec<_> = (0..2).map(|c| iid_normal(4, c, 5_000, 0.0)).collect();
    let shifted: Vec<_> = (0..2).map(|c| iid_normal(4, c, 5_000, 0.5)).collect();

    let same = agreement_report(&a, &b).unwrap();
    assert!(same.pass, "{same:?}");
    let diff = agreement_report(&a, &shifted).unwrap();
    assert!(!diff.pass);
    let row = diff.rows.iter().find(|r| r.quantity == Quantity::LogArea(0)).unwrap();
    assert!(row.z > 10.0 && row.ks.p_value < 1e-6);

    let own = agreement_report(&a, &a).unwrap();
    assert_eq!(own.max_z, 0.0);
    assert!(own.rows.iter().all(|r| r.ks.statistic == 0.0 && r.mean_a == r.mean_b));
    assert!(own.pass);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let a = vec![iid_normal(5, 0, 100, 0.0)];
    let s = ParameterState::new(vec![0.0, 0.0], vec![0.0], vec![1.0, 1.0]).unwrap();
    let b = vec![sequence(0, vec![s; 100])];
    assert!(agreement_report(&a, &b).is_err());
}
