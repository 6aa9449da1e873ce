//! Full conditional of a variance parameter and the variance marginal with the
//! Gaussian mean block integrated out.

use crate::domain::{Model, VariancePrior};
use crate::error::{Error, Result};
use crate::samplers::gig::GigParams;
use crate::twoway::MeanSystem;

/// GIG law of `v_i | B, G, y`.
///
/// Expanding `Σ (r + v/2)²` with `r = y - B - G` leaves the density
/// `v^(-n/2-α-1) exp(-(Σr² + 2β)/(2v) - n v/8)`, i.e.
/// `GIG(p = -n/2 - α, chi = Σr² + 2β, psi = n/4)`. The improper 1/v prior is
/// `α = β = 0`.
pub fn update_variance_conditional(
    instrument: usize,
    residuals: &[f64],
    prior: &VariancePrior,
) -> Result<GigParams> {
    if residuals.is_empty() {
        return Err(Error::Usage("variance conditional needs residuals".into()));
    }
    let n = residuals.len() as f64;
    let (a, b) = prior.shape_scale();
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    let chi = ss + 2.0 * b;
    if !(chi > 0.0) {
        return Err(Error::DegenerateConditional {
            instrument,
            reason: "all residuals are zero under the improper variance prior".into(),
        });
    }
    GigParams::new(-n / 2.0 - a, chi, n / 4.0)
}

/// `log p(y | v) + log p(v)` up to a constant that does not depend on `v`.
///
/// The `(B, G)` block is integrated analytically:
/// `-½ Σ_entries log v_i - ½ log det P(v) - ½ Q(v)` where `Q` is the weighted
/// least-squares objective at the conditional mean.
pub fn marginal_log_density_v(variance: &[f64], model: &Model) -> Result<f64> {
    let sys = MeanSystem::new(model, variance)?;
    let noise: f64 = model
        .data
        .entries()
        .iter()
        .map(|e| variance[e.instrument].ln())
        .sum();
    let prior: f64 = model
        .prior
        .instruments
        .iter()
        .zip(variance)
        .map(|(p, &v)| p.variance.log_density(v))
        .sum();
    Ok(-0.5 * noise - 0.5 * sys.log_det_precision() - 0.5 * sys.min_quadratic() + prior)
}
