//! Closed-form pieces of the conditional updates.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};

/// Inverse-gamma law with density `b^a / Gamma(a) x^(-a-1) exp(-b/x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
            return Err(invalid(format!(
                "inverse gamma needs positive finite shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(Self { shape, scale })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0).expect("validated shape");
        let x: f64 = g.sample(rng);
        self.scale / x
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln()
            - self.scale / x
    }

    /// `scale / (shape - 1)`; infinite when `shape <= 1`.
    pub fn mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.scale / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    /// Finite only when `shape > 2`.
    pub fn variance(&self) -> f64 {
        if self.shape > 2.0 {
            let a = self.shape;
            self.scale * self.scale / ((a - 1.0) * (a - 1.0) * (a - 2.0))
        } else {
            f64::INFINITY
        }
    }
}

/// Log density of the log-normal law: `log x ~ N(mu, var)`.
pub fn ln_lognormal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    let z = x.ln() - mu;
    -x.ln() - 0.5 * (2.0 * std::f64::consts::PI * var).ln() - z * z / (2.0 * var)
}

/// Sum over increments of `log N(d_j; 0, volatility W_j)`, given the total
/// dimension `sum_j dim(d_j)` and `quad = sum_j d_j' W_j^-1 d_j`. The
/// `log det W_j` terms are omitted; they cancel in every ratio this is used
/// in.
pub fn ln_increment_density(volatility: f64, quad: f64, total_dim: f64) -> f64 {
    if !(volatility > 0.0) {
        return f64::NEG_INFINITY;
    }
    -0.5 * (total_dim * (2.0 * std::f64::consts::PI * volatility).ln() + quad / volatility)
}

/// Inputs of the volatility Metropolis-Hastings step for one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolatilityTarget {
    /// `x_i' beta`.
    pub prior_mean: f64,
    /// Residual variance of the log-volatility regression.
    pub prior_var: f64,
    /// `sum_j d_j' W_j^-1 d_j` over the subject's increments.
    pub quad: f64,
    /// `n_i q`.
    pub total_dim: f64,
    /// Inverse-gamma pseudo-posterior used as the independence proposal.
    pub proposal: InverseGamma,
}

impl VolatilityTarget {
    /// Log acceptance ratio for moving from `current` to `proposed`:
    /// target (log-normal prior times Gaussian increments) at the proposal
    /// times proposal density at the current value, over the same with the
    /// roles swapped.
    pub fn log_ratio(&self, current: f64, proposed: f64) -> f64 {
        let num = ln_lognormal_pdf(proposed, self.prior_mean, self.prior_var)
            + ln_increment_density(proposed, self.quad, self.total_dim)
            + self.proposal.ln_pdf(current);
        let den = ln_lognormal_pdf(current, self.prior_mean, self.prior_var)
            + ln_increment_density(current, self.quad, self.total_dim)
            + self.proposal.ln_pdf(proposed);
        num - den
    }

    /// Unnormalized log target density.
    pub fn ln_target(&self, x: f64) -> f64 {
        ln_lognormal_pdf(x, self.prior_mean, self.prior_var)
            + ln_increment_density(x, self.quad, self.total_dim)
    }
}

/// Result of one Metropolis-Hastings proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhOutcome {
    Accepted,
    Rejected,
    /// The log ratio was not finite; the proposal was rejected.
    NonFinite,
}

pub fn mh_step<R: Rng + ?Sized>(target: &VolatilityTarget, current: f64, rng: &mut R) -> (f64, MhOutcome) {
    let proposed = target.proposal.sample(rng);
    let log_r = target.log_ratio(current, proposed);
    if !log_r.is_finite() {
        return (current, MhOutcome::NonFinite);
    }
    let u: f64 = rng.random();
    if u.ln() < log_r {
        (proposed, MhOutcome::Accepted)
    } else {
        (current, MhOutcome::Rejected)
    }
}

pub fn chi_squared<R: Rng + ?Sized>(dof: f64, rng: &mut R) -> f64 {
    ChiSquared::new(dof).expect("positive degrees of freedom").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_value_ratio_is_zero() {
        let t = VolatilityTarget {
            prior_mean: 0.3,
            prior_var: 1.2,
            quad: 4.0,
            total_dim: 7.0,
            proposal: InverseGamma::new(3.5, 2.0).unwrap(),
        };
        for x in [0.01, 0.5, 1.0, 13.0] {
            assert_eq!(t.log_ratio(x, x), 0.0);
        }
    }

    #[test]
    fn inverse_gamma_density_normalizes() {
        let ig = InverseGamma::new(2.5, 1.5).unwrap();
        let h = 1e-4;
        let total: f64 = (1..400_000).map(|i| ig.ln_pdf(i as f64 * h).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        assert_eq!(ig.mean(), 1.0);
    }

    #[test]
    fn inverse_gamma_rejects_bad_parameters() {
        assert!(InverseGamma::new(0.0, 1.0).is_err());
        assert!(InverseGamma::new(1.0, -1.0).is_err());
    }

    #[test]
    fn nonpositive_values_have_zero_density() {
        assert_eq!(ln_lognormal_pdf(0.0, 0.0, 1.0), f64::NEG_INFINITY);
        assert_eq!(ln_increment_density(-1.0, 1.0, 1.0), f64::NEG_INFINITY);
    }
}
