mod common;

use concordance::diagnostics::{autocorrelation, ks_one_sample, summarize, Quantity};
use concordance::domain::{DrawSequence, LogScaleData, Method};
use concordance::samplers::{
    chain_rng, conditional_mean_draw, marginal_log_density_v, sample_gig, GigParams,
};
use concordance::{
    CalibrationPrior, InstrumentPrior, Model, NormalPrior, SamplerConfig, SamplerRegistry,
    VariancePrior,
};
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma_ur;

fn model_2x3(missing: Option<(usize, usize)>, source_prior: bool) -> Model {
    let ys = [[1.2, 1.9, 3.1], [0.4, 1.3, 2.2]];
    let cells = (0..2)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|&c| Some(c) != missing)
        .map(|(i, j)| (i, j, ys[i][j]));
    let data = LogScaleData::from_cells(2, 3, cells).unwrap();
    let mut prior = CalibrationPrior::new(
        vec![
            InstrumentPrior {
                log_area: NormalPrior::new(0.5, 0.3),
                variance: VariancePrior::InverseGamma { shape: 3.0, scale: 0.4 },
            },
            InstrumentPrior {
                log_area: NormalPrior::new(-0.2, 0.8),
                variance: VariancePrior::InverseGamma { shape: 2.0, scale: 0.1 },
            },
        ],
        3,
    );
    if source_prior {
        prior = prior.with_source_priors(vec![
            NormalPrior::new(0.6, 1.5),
            NormalPrior::new(1.4, 2.0),
            NormalPrior::new(2.5, 1.0),
        ]);
    }
    Model::new(data, prior).unwrap()
}

/// Dense `(mean, covariance)` of `(B, G) | v, y` built from the normal equations.
fn dense_conditional(model: &Model, v: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, m) = (model.n_instruments(), model.n_sources());
    let mut p = DMatrix::<f64>::zeros(n + m, n + m);
    let mut r = DVector::<f64>::zeros(n + m);
    for (i, ip) in model.prior.instruments.iter().enumerate() {
        let w = ip.log_area.precision();
        p[(i, i)] += w;
        r[i] += w * ip.log_area.location;
    }
    for (j, sp) in model.prior.sources.iter().enumerate() {
        let w = sp.precision();
        p[(n + j, n + j)] += w;
        if w > 0.0 {
            r[n + j] += w * sp.location;
        }
    }
    for e in model.data.entries() {
        let (a, b) = (e.instrument, n + e.source);
        let w = 1.0 / v[e.instrument];
        let yt = e.y + 0.5 * v[e.instrument];
        p[(a, a)] += w;
        p[(b, b)] += w;
        p[(a, b)] += w;
        p[(b, a)] += w;
        r[a] += w * yt;
        r[b] += w * yt;
    }
    let cov = p.try_inverse().unwrap();
    (&cov * r, cov)
}

#[test]
fn mean_block_draws_match_dense_moments() {
    let model = model_2x3(None, false);
    let v = [0.1, 0.3];
    let (mu, cov) = dense_conditional(&model, &v);
    let mut rng = chain_rng(3, 0);
    let n_draws = 100_000;
    let d = mu.len();
    let mut sum = DVector::<f64>::zeros(d);
    let mut sq = DMatrix::<f64>::zeros(d, d);
    for _ in 0..n_draws {
        let (b, g) = conditional_mean_draw(&model, &v, &mut rng).unwrap();
        let x = DVector::from_iterator(d, b.into_iter().chain(g));
        let c = &x - &mu;
        sum += &x;
        sq += &c * c.transpose();
    }
    let nd = n_draws as f64;
    let mean = sum / nd;
    let emp = sq / nd;
    for k in 0..d {
        let se = (cov[(k, k)] / nd).sqrt();
        assert!((mean[k] - mu[k]).abs() < 4.0 * se, "mean {k}: {} vs {}", mean[k], mu[k]);
        for l in 0..d {
            let se = ((cov[(k, k)] * cov[(l, l)] + cov[(k, l)].powi(2)) / nd).sqrt();
            assert!((emp[(k, l)] - cov[(k, l)]).abs() < 4.0 * se, "cov ({k},{l})");
        }
    }
}

/// `log p(y | v)` when every mean parameter has a proper normal prior:
/// `y ~ N(X m0 - v/2, diag(v) + X S0 X')`.
fn gaussian_marginal(model: &Model, v: &[f64]) -> f64 {
    let entries = model.data.entries();
    let k = entries.len();
    let mut mean = DVector::<f64>::zeros(k);
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for (a, ea) in entries.iter().enumerate() {
        let bi = &model.prior.instruments[ea.instrument].log_area;
        let gj = &model.prior.sources[ea.source];
        mean[a] = ea.y - (bi.location + gj.location - 0.5 * v[ea.instrument]);
        for (b, eb) in entries.iter().enumerate() {
            if ea.instrument == eb.instrument {
                cov[(a, b)] += bi.spread.powi(2);
            }
            if ea.source == eb.source {
                cov[(a, b)] += gj.spread.powi(2);
            }
        }
        cov[(a, a)] += v[ea.instrument];
    }
    let chol = cov.cholesky().unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let q = mean.dot(&chol.solve(&mean));
    -0.5 * (logdet + q + k as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn variance_marginal_matches_the_gaussian_marginal() {
    let model = model_2x3(Some((1, 0)), true);
    let prior_term = |v: &[f64]| -> f64 {
        model.prior.instruments.iter().zip(v).map(|(p, &x)| p.variance.log_density(x)).sum()
    };
    let reference = [0.2, 0.2];
    let offset = marginal_log_density_v(&reference, &model).unwrap()
        - gaussian_marginal(&model, &reference)
        - prior_term(&reference);
    for v in [[0.01, 0.05], [0.5, 0.02], [2.0, 3.0], [1e-4, 10.0]] {
        let lhs = marginal_log_density_v(&v, &model).unwrap();
        let rhs = gaussian_marginal(&model, &v) + prior_term(&v) + offset;
        assert!((lhs - rhs).abs() < 1e-6 * (1.0 + lhs.abs()), "{v:?}: {lhs} vs {rhs}");
    }
}

#[test]
fn variance_marginal_is_integrable_with_proper_priors() {
    let model = model_2x3(None, false);
    // Integrate exp(marginal) over (log v1, log v2) on nested grids; the
    // outer band beyond the inner box must carry negligible mass.
    let f = |a: f64, b: f64| {
        let v = [a.exp(), b.exp()];
        (marginal_log_density_v(&v, &model).unwrap() + a + b).exp()
    };
    let grid = |lo: f64, hi: f64, k: usize| -> f64 {
        let h = (hi - lo) / k as f64;
        let mut s = 0.0;
        for x in 0..k {
            for y in 0..k {
                s += f(lo + (x as f64 + 0.5) * h, lo + (y as f64 + 0.5) * h);
            }
        }
        s * h * h
    };
    let inner = grid(-12.0, 4.0, 320);
    let outer = grid(-24.0, 8.0, 640);
    assert!(inner.is_finite() && inner > 0.0);
    assert!((outer - inner).abs() / inner < 1e-6, "{inner} vs {outer}");
}

#[test]
fn gig_tends_to_inverse_gamma_as_psi_vanishes() {
    let params = GigParams::new(-3.0, 1.2, 1e-9).unwrap();
    let mut rng = chain_rng(11, 0);
    let draws: Vec<f64> = (0..20_000).map(|_| sample_gig(&params, &mut rng)).collect();
    // IG(shape 3, scale 0.6): P(X <= x) = Q(3, 0.6 / x).
    let ks = ks_one_sample(&draws, |x| if x <= 0.0 { 0.0 } else { gamma_ur(3.0, 0.6 / x) }).unwrap();
    assert!(ks.statistic < 0.02, "{ks:?}");
    assert!(ks.p_value > 0.001, "{ks:?}");
}

#[test]
fn gig_concentrates_at_the_mode_for_many_residuals() {
    let n = 4000.0;
    let params = GigParams::new(-n / 2.0 - 2.0, n * 0.09 + 0.2, n / 4.0).unwrap();
    let mode = params.mode();
    let mut rng = chain_rng(12, 0);
    let k = 5000;
    let mean = (0..k).map(|_| sample_gig(&params, &mut rng)).sum::<f64>() / k as f64;
    assert!((mean / mode - 1.0).abs() < 5e-3, "{mean} vs {mode}");
    // Stationary point of the log kernel.
    let h = 1e-7 * mode;
    let slope = (params.log_kernel(mode + h) - params.log_kernel(mode - h)) / (2.0 * h);
    assert!(slope.abs() < 1e-3 * n);
}

fn run(model: &Model, method: Method, iterations: usize, warmup: usize, seed: u64) -> Vec<DrawSequence> {
    let cfg = SamplerConfig::new(method, iterations, warmup, seed).with_chains(2);
    SamplerRegistry::with_defaults().run(model, &cfg).unwrap()
}

#[test]
fn every_sampler_is_deterministic_in_its_seed() {
    let model = model_2x3(None, false);
    for method in Method::ALL {
        let a = run(&model, method, 300, 100, 42);
        let b = run(&model, method, 300, 100, 42);
        let c = run(&model, method, 300, 100, 43);
        assert_eq!(a, b, "{method}");
        assert_ne!(a[0].draws, c[0].draws, "{method}");
        assert_ne!(a[0].draws, a[1].draws, "{method}");
    }
}

#[test]
fn block_and_vanilla_gibbs_agree_and_block_mixes_better() {
    let model = common::instance_3x5();
    let block = run(&model, Method::BlockGibbs, 20_000, 2_000, 5);
    let vanilla = run(&model, Method::VanillaGibbs, 20_000, 2_000, 5);
    let sb = summarize(&block).unwrap();
    let sv = summarize(&vanilla).unwrap();
    for (rb, rv) in sb.rows.iter().zip(&sv.rows) {
        let z = (rb.mean - rv.mean).abs() / (rb.mcse.powi(2) + rv.mcse.powi(2)).sqrt();
        assert!(z < 4.0, "{}: {} vs {} (z = {z})", rb.name, rb.mean, rv.mean);
    }
    let lag1 = |seqs: &[DrawSequence]| {
        let x: Vec<f64> = seqs[0].draws.iter().map(|s| s.log_area[0]).collect();
        autocorrelation(&x, 1)
    };
    assert!(lag1(&block) <= lag1(&vanilla), "{} vs {}", lag1(&block), lag1(&vanilla));
    assert!(sb.get(Quantity::LogArea(0)).unwrap().ess > sv.get(Quantity::LogArea(0)).unwrap().ess);
}

#[test]
fn exact_sampler_recovers_the_prior_on_an_uninformative_cell() {
    let data = LogScaleData::from_cells(1, 1, [(0, 0, 0.7)]).unwrap();
    let prior = CalibrationPrior::new(
        vec![InstrumentPrior {
            log_area: NormalPrior::new(0.0, 1.0),
            variance: VariancePrior::InverseGamma { shape: 2.0, scale: 1.0 },
        }],
        1,
    );
    let model = Model::new(data, prior).unwrap();
    let seqs = run(&model, Method::ExactIid, 2_000, 0, 8);
    let v: Vec<f64> = seqs.iter().flat_map(|s| s.draws.iter().map(|d| d.variance[0])).collect();
    let ks = ks_one_sample(&v, |x| if x <= 0.0 { 0.0 } else { gamma_ur(2.0, 1.0 / x) }).unwrap();
    assert!(ks.p_value > 0.001, "{ks:?}");
    assert_eq!(seqs[0].stats.envelope_restarts, 0);
}
