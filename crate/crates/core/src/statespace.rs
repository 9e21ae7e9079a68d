//! Exact discretization of an integrated Wiener process.
//!
//! The state `(X, X', ..., X^(r-1))` of a process with `D^r X = dW/dt`
//! evolves between two epochs `delta` apart as
//! `X_{j+1} = G X_j + w_j`, `w_j ~ N(0, W)`, where `G = exp(C delta)` for the
//! nilpotent shift matrix `C` and `W` is the integrated noise covariance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, numerical, Result};

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

fn check_args(order: usize, delta: f64) -> Result<()> {
    if order == 0 {
        return Err(invalid("process order must be at least 1"));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(invalid(format!(
            "time gap must be finite and nonnegative, got {delta}"
        )));
    }
    Ok(())
}

/// `exp(C delta)` for the `order x order` shift matrix `C`.
///
/// `C^order = 0`, so the exponential series stops at `C^(order-1)`; the
/// `k = order` term of the textbook sum is identically zero.
pub fn transition_matrix(order: usize, delta: f64) -> Result<DMatrix<f64>> {
    check_args(order, delta)?;
    let mut g = DMatrix::zeros(order, order);
    for l in 0..order {
        for k in 0..order - l {
            g[(l, l + k)] = delta.powi(k as i32) / factorial(k);
        }
    }
    Ok(g)
}

/// Process-noise covariance `W = int_0^delta exp(C u) D D' exp(C' u) du`.
///
/// Closed form (1-based `l, l'`):
/// `delta^(2r+1-l-l') / ((r-l)! (r-l')! (2r+1-l-l'))`.
pub fn process_noise(order: usize, delta: f64) -> Result<DMatrix<f64>> {
    check_args(order, delta)?;
    let r = order;
    let mut w = DMatrix::zeros(r, r);
    for l in 1..=r {
        for lp in l..=r {
            let e = 2 * r + 1 - l - lp;
            let v = delta.powi(e as i32) / (factorial(r - l) * factorial(r - lp) * e as f64);
            w[(l - 1, lp - 1)] = v;
            w[(lp - 1, l - 1)] = v;
        }
    }
    Ok(w)
}

/// One step of the discretized process.
#[derive(Debug, Clone)]
pub struct Transition {
    order: usize,
    delta: f64,
    g: DMatrix<f64>,
    w: DMatrix<f64>,
    w_chol: Option<Cholesky<f64, Dyn>>,
}

impl Transition {
    pub fn new(order: usize, delta: f64) -> Result<Self> {
        let g = transition_matrix(order, delta)?;
        let w = process_noise(order, delta)?;
        let w_chol = if delta > 0.0 {
            Cholesky::new(w.clone())
        } else {
            None
        };
        Ok(Self {
            order,
            delta,
            g,
            w,
            w_chol,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `to - G from`, the realized process-noise increment.
    pub fn innovation(&self, from: &DVector<f64>, to: &DVector<f64>) -> DVector<f64> {
        to - &self.g * from
    }

    /// `d' W^-1 d` via the Cholesky factor of `W`.
    pub fn noise_quadratic_form(&self, d: &DVector<f64>) -> Result<f64> {
        let chol = self.w_chol.as_ref().ok_or_else(|| {
            numerical(format!(
                "process noise is singular (order {}, delta {})",
                self.order, self.delta
            ))
        })?;
        let z = chol
            .l_dirty()
            .solve_lower_triangular(d)
            .ok_or_else(|| numerical("triangular solve failed"))?;
        Ok(z.norm_squared())
    }

    /// `log det W`.
    pub fn log_det_noise(&self) -> Result<f64> {
        let chol = self
            .w_chol
            .as_ref()
            .ok_or_else(|| numerical("process noise is singular"))?;
        Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    /// Transitions between consecutive entries of `times`.
    pub fn chain(order: usize, times: &[f64]) -> Result<Vec<Transition>> {
        times
            .windows(2)
            .map(|w| {
                let delta = w[1] - w[0];
                if delta <= 0.0 {
                    return Err(invalid(format!(
                        "epochs must be strictly increasing ({} then {})",
                        w[0], w[1]
                    )));
                }
                Transition::new(order, delta)
            })
            .collect()
    }
}
