//! Covariance structure of the Gaussian processes induced by the SDE priors.
//!
//! A process `D^r X = sigma dW/dt` started from `X(0) ~ N(0, sigma0^2 I)` has
//! covariance `sigma0^2 R0(s, t) + sigma^2 R1(s, t)`, where `R0` spans the
//! polynomials of degree `< r` and `R1` is the integrated Green's-function
//! kernel. The same kernels give the representer bases of the penalized
//! spline, and [`direct_gp_posterior`] uses them for dense Gaussian
//! conditioning, which serves as an oracle for the state-space route.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{invalid, numerical, Result};
use crate::statespace::factorial;

/// `t^l / l!`
pub fn poly_basis(l: usize, t: f64) -> f64 {
    t.powi(l as i32) / factorial(l)
}

/// `sum_{l < r} phi_l(s) phi_l(t)`.
pub fn null_kernel(order: usize, s: f64, t: f64) -> f64 {
    null_kernel_deriv(order, 0, 0, s, t)
}

/// Mixed derivative `D_s^a D_t^b` of [`null_kernel`].
pub fn null_kernel_deriv(order: usize, a: usize, b: usize, s: f64, t: f64) -> f64 {
    (a.max(b)..order)
        .map(|l| poly_basis(l - a, s) * poly_basis(l - b, t))
        .sum()
}

/// `int_0^min(s,t) G_r(s,u) G_r(t,u) du` with `G_r(s,u) = (s-u)_+^(r-1)/(r-1)!`.
pub fn green_kernel(order: usize, s: f64, t: f64) -> f64 {
    let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
    green_kernel_deriv(order, 0, 0, lo, hi)
}

/// Mixed derivative `D_s^a D_t^b` of [`green_kernel`], i.e. the covariance
/// between the `a`-th derivative at `s` and the `b`-th derivative at `t` of
/// the integrated Wiener process of the given order.
pub fn green_kernel_deriv(order: usize, a: usize, b: usize, s: f64, t: f64) -> f64 {
    debug_assert!(a < order && b < order);
    let m = s.min(t);
    if m <= 0.0 {
        return 0.0;
    }
    // Exponents of the truncated powers after differentiation.
    let ea = order - 1 - a;
    let eb = order - 1 - b;
    // Substitute v = m - u; the factor belonging to the smaller argument is
    // v^e, the other is (v + d)^e'.
    let (e_short, e_long, d) = if s <= t {
        (ea, eb, t - s)
    } else {
        (eb, ea, s - t)
    };
    let mut total = 0.0;
    let mut binom = 1.0;
    for k in 0..=e_long {
        let p = e_short + k + 1;
        total += binom * d.powi((e_long - k) as i32) * m.powi(p as i32) / p as f64;
        binom = binom * (e_long - k) as f64 / (k + 1) as f64;
    }
    total / (factorial(ea) * factorial(eb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `n x r` polynomial basis matrix `phi_l(t_i)`.
    Null,
    /// `n x n` Gram matrix of [`green_kernel`].
    Green,
}

fn check_sorted(points: &[f64]) -> Result<()> {
    if points.iter().any(|t| !t.is_finite()) {
        return Err(invalid("kernel points must be finite"));
    }
    if points.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("kernel points must be sorted ascending"));
    }
    Ok(())
}

pub fn gram(points: &[f64], order: usize, kind: KernelKind) -> Result<DMatrix<f64>> {
    if order == 0 {
        return Err(invalid("kernel order must be at least 1"));
    }
    check_sorted(points)?;
    let n = points.len();
    Ok(match kind {
        KernelKind::Null => DMatrix::from_fn(n, order, |i, l| poly_basis(l, points[i])),
        KernelKind::Green => {
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = green_kernel(order, points[i], points[j]);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            k
        }
    })
}

/// Green-kernel cross matrix `R1(rows_i, cols_j)` for arbitrary point sets.
pub fn cross_gram(rows: &[f64], cols: &[f64], order: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        green_kernel(order, rows[i], cols[j])
    })
}

/// Order and domain `[0, t_U]` of one kernel family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub order: usize,
    pub domain_end: f64,
}

impl KernelSpec {
    pub fn new(order: usize, domain_end: f64) -> Result<Self> {
        if order == 0 {
            return Err(invalid("kernel order must be at least 1"));
        }
        if !(domain_end > 0.0) || !domain_end.is_finite() {
            return Err(invalid("domain end must be positive"));
        }
        Ok(Self { order, domain_end })
    }

    pub fn gram(&self, points: &[f64], kind: KernelKind) -> Result<DMatrix<f64>> {
        if points.iter().any(|&t| t < 0.0 || t > self.domain_end) {
            return Err(invalid(format!(
                "kernel points must lie in [0, {}]",
                self.domain_end
            )));
        }
        gram(points, self.order, kind)
    }
}

/// A latent integrated Wiener process started at time 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentProcess {
    pub order: usize,
    pub initial_var: f64,
    pub diffusion_var: f64,
}

impl LatentProcess {
    /// Prior covariance of `D^a X(s)` and `D^b X(t)`.
    pub fn covariance(&self, a: usize, s: f64, b: usize, t: f64) -> f64 {
        self.initial_var * null_kernel_deriv(self.order, a, b, s, t)
            + self.diffusion_var * green_kernel_deriv(self.order, a, b, s, t)
    }
}

/// Evaluation of the `coord`-th derivative of one latent process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEval {
    pub process: usize,
    pub coord: usize,
    pub time: f64,
}

/// Weighted sum of point evaluations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearFunctional(pub Vec<(f64, PointEval)>);

impl LinearFunctional {
    pub fn point(process: usize, coord: usize, time: f64) -> Self {
        Self(vec![(1.0, PointEval { process, coord, time })])
    }

    pub fn plus(mut self, other: LinearFunctional) -> Self {
        self.0.extend(other.0);
        self
    }
}

#[derive(Debug, Clone)]
pub struct GpObservation {
    pub functional: LinearFunctional,
    pub value: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `log N(y; 0, K_yy)`; zero with no observations.
    pub log_marginal: f64,
}

/// Largest number of observations the dense oracle accepts.
pub const DIRECT_GP_MAX_OBS: usize = 200;

fn functional_cov(
    processes: &[LatentProcess],
    f: &LinearFunctional,
    g: &LinearFunctional,
) -> Result<f64> {
    let mut total = 0.0;
    for (ca, a) in &f.0 {
        for (cb, b) in &g.0 {
            if a.process != b.process {
                continue;
            }
            let proc = processes
                .get(a.process)
                .ok_or_else(|| invalid(format!("unknown process {}", a.process)))?;
            if a.coord >= proc.order || b.coord >= proc.order {
                return Err(invalid("derivative index exceeds process order"));
            }
            total += ca * cb * proc.covariance(a.coord, a.time, b.coord, b.time);
        }
    }
    Ok(total)
}

/// Exact Gaussian conditioning of independent zero-mean latent processes on
/// noisy linear observations.
///
/// Returns the posterior mean and covariance of `targets`. The observation
/// covariance is factored directly; if that fails a jitter of
/// `1e-10 * trace / n` is added before a second attempt.
pub fn direct_gp_posterior(
    processes: &[LatentProcess],
    observations: &[GpObservation],
    targets: &[LinearFunctional],
) -> Result<GpPosterior> {
    let n = observations.len();
    if n > DIRECT_GP_MAX_OBS {
        return Err(invalid(format!(
            "direct GP oracle is limited to {DIRECT_GP_MAX_OBS} observations, got {n}"
        )));
    }
    let nt = targets.len();
    let mut k_tt = DMatrix::zeros(nt, nt);
    for i in 0..nt {
        for j in i..nt {
            let v = functional_cov(processes, &targets[i], &targets[j])?;
            k_tt[(i, j)] = v;
            k_tt[(j, i)] = v;
        }
    }
    if n == 0 {
        return Ok(GpPosterior {
            mean: DVector::zeros(nt),
            cov: k_tt,
            log_marginal: 0.0,
        });
    }

    let mut k_yy = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = functional_cov(
                processes,
                &observations[i].functional,
                &observations[j].functional,
            )?;
            k_yy[(i, j)] = v;
            k_yy[(j, i)] = v;
        }
        if !(observations[i].noise_var >= 0.0) {
            return Err(invalid("observation noise variance must be nonnegative"));
        }
        k_yy[(i, i)] += observations[i].noise_var;
    }
    let k_ty = DMatrix::from_fn(nt, n, |i, j| {
        functional_cov(processes, &targets[i], &observations[j].functional).unwrap_or(f64::NAN)
    });
    if k_ty.iter().any(|v| v.is_nan()) {
        return Err(invalid("malformed target functional"));
    }
    let y = DVector::from_iterator(n, observations.iter().map(|o| o.value));

    let chol = match Cholesky::new(k_yy.clone()) {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * k_yy.trace() / n as f64;
            let mut jittered = k_yy.clone();
            for i in 0..n {
                jittered[(i, i)] += jitter;
            }
            Cholesky::new(jittered).ok_or_else(|| {
                let diag = k_yy.diagonal();
                let sym = k_yy.clone().symmetric_eigenvalues();
                numerical(format!(
                    "observation covariance not positive definite: n = {n}, \
                     diagonal range [{:.3e}, {:.3e}], eigenvalue range [{:.3e}, {:.3e}]",
                    diag.min(),
                    diag.max(),
                    sym.min(),
                    sym.max()
                ))
            })?
        }
    };

    let alpha = chol.solve(&y);
    let mean = &k_ty * &alpha;
    let v = chol.solve(&k_ty.transpose());
    let mut cov = k_tt - &k_ty * v;
    cov = (&cov + cov.transpose()) * 0.5;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_marginal =
        -0.5 * (y.dot(&alpha) + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok(GpPosterior {
        mean,
        cov,
        log_marginal,
    })
}

/// Variance components of the hierarchical model, indexed by 0-based group
/// and subject.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalVariances {
    pub sigma2_m0: f64,
    pub sigma2_m: Vec<f64>,
    pub sigma2_u0: f64,
    pub sigma2_u: Vec<f64>,
    pub sigma2_eps: f64,
}

/// The hierarchical prior `Y_i(t) = M_k(t) + U_i(t) + eps` written as a set
/// of independent latent processes: groups first, then subjects.
#[derive(Debug, Clone)]
pub struct HierarchicalGp {
    pub processes: Vec<LatentProcess>,
    pub observations: Vec<GpObservation>,
    n_groups: usize,
}

impl HierarchicalGp {
    pub fn new(data: &Dataset, p: usize, q: usize, vars: &HierarchicalVariances) -> Result<Self> {
        if vars.sigma2_m.len() != data.n_groups() || vars.sigma2_u.len() != data.n_subjects() {
            return Err(invalid("variance vectors do not match dataset dimensions"));
        }
        let mut processes: Vec<LatentProcess> = vars
            .sigma2_m
            .iter()
            .map(|&s| LatentProcess {
                order: p,
                initial_var: vars.sigma2_m0,
                diffusion_var: s,
            })
            .collect();
        processes.extend(vars.sigma2_u.iter().map(|&s| LatentProcess {
            order: q,
            initial_var: vars.sigma2_u0,
            diffusion_var: s,
        }));
        let mut observations = Vec::new();
        for (i, subj) in data.subjects().iter().enumerate() {
            for (&t, &y) in subj.times.iter().zip(&subj.values) {
                observations.push(GpObservation {
                    functional: LinearFunctional::point(subj.group - 1, 0, t)
                        .plus(LinearFunctional::point(data.n_groups() + i, 0, t)),
                    value: y,
                    noise_var: vars.sigma2_eps,
                });
            }
        }
        Ok(Self {
            processes,
            observations,
            n_groups: data.n_groups(),
        })
    }

    /// Process index of group `k` (0-based).
    pub fn mean_process(&self, k: usize) -> usize {
        k
    }

    /// Process index of subject `i` (0-based).
    pub fn deviation_process(&self, i: usize) -> usize {
        self.n_groups + i
    }

    pub fn posterior(&self, targets: &[LinearFunctional]) -> Result<GpPosterior> {
        direct_gp_posterior(&self.processes, &self.observations, targets)
    }
}
