//! Kalman filter, fixed-interval (RTS) smoother and the mean-correction
//! simulation smoother for linear-Gaussian state-space models.
//!
//! Multiple observation rows at one epoch are absorbed as sequential scalar
//! updates; an epoch without rows is a pure prediction step. Covariances are
//! updated in Joseph form and symmetrized after every step.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, numerical, Result};
use crate::statespace::Transition;

/// One scalar observation `y = F x + e`, `e ~ N(0, variance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub loading: DVector<f64>,
    pub value: f64,
    pub variance: f64,
}

/// State transition `x_{j+1} = G x_j + w`, `w ~ N(0, noise)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    pub transition: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSsm {
    times: Vec<f64>,
    state_dim: usize,
    rows: Vec<Vec<ObservationRow>>,
    steps: Vec<StepModel>,
    initial_mean: DVector<f64>,
    initial_cov: DMatrix<f64>,
}

impl LinearGaussianSsm {
    pub fn new(
        times: Vec<f64>,
        steps: Vec<StepModel>,
        initial_mean: DVector<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let r = initial_mean.len();
        if r == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        if times.is_empty() || steps.len() + 1 != times.len() {
            return Err(invalid("need one step model per consecutive epoch pair"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("epochs must be strictly increasing"));
        }
        if initial_cov.shape() != (r, r) {
            return Err(invalid("initial covariance has wrong shape"));
        }
        for s in &steps {
            if s.transition.shape() != (r, r) || s.noise.shape() != (r, r) {
                return Err(invalid("step model has wrong shape"));
            }
        }
        Ok(Self {
            rows: vec![Vec::new(); times.len()],
            times,
            state_dim: r,
            steps,
            initial_mean,
            initial_cov,
        })
    }

    /// Integrated Wiener process of order `transitions[0].order()` with noise
    /// covariances `diffusion_var * W_j`.
    pub fn from_transitions(
        times: Vec<f64>,
        transitions: &[Transition],
        diffusion_var: f64,
        initial_mean: DVector<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let steps = transitions
            .iter()
            .map(|t| StepModel {
                transition: t.g().clone(),
                noise: t.w() * diffusion_var,
            })
            .collect();
        Self::new(times, steps, initial_mean, initial_cov)
    }

    /// Integrated Wiener process on `times` with `N(0, initial_var I)` at
    /// `times[0]`.
    pub fn integrated_wiener(
        times: Vec<f64>,
        order: usize,
        diffusion_var: f64,
        initial_var: f64,
    ) -> Result<Self> {
        let transitions = Transition::chain(order, &times)?;
        Self::from_transitions(
            times,
            &transitions,
            diffusion_var,
            DVector::zeros(order),
            DMatrix::identity(order, order) * initial_var,
        )
    }

    pub fn observe(&mut self, epoch: usize, row: ObservationRow) -> Result<()> {
        if epoch >= self.times.len() {
            return Err(invalid(format!("epoch {epoch} out of range")));
        }
        if row.loading.len() != self.state_dim {
            return Err(invalid("loading length differs from state dimension"));
        }
        if !(row.variance > 0.0) || !row.value.is_finite() {
            return Err(invalid(format!(
                "observation at epoch {epoch} needs positive variance and finite value"
            )));
        }
        self.rows[epoch].push(row);
        Ok(())
    }

    /// Observation of the first state coordinate.
    pub fn observe_level(&mut self, epoch: usize, value: f64, variance: f64) -> Result<()> {
        let mut loading = DVector::zeros(self.state_dim);
        loading[0] = 1.0;
        self.observe(epoch, ObservationRow { loading, value, variance })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_epochs(&self) -> usize {
        self.times.len()
    }

    pub fn rows(&self, epoch: usize) -> &[ObservationRow] {
        &self.rows[epoch]
    }

    pub fn steps(&self) -> &[StepModel] {
        &self.steps
    }

    pub fn initial_mean(&self) -> &DVector<f64> {
        &self.initial_mean
    }

    pub fn initial_cov(&self) -> &DMatrix<f64> {
        &self.initial_cov
    }

    fn observed_values(&self) -> Vec<f64> {
        self.rows.iter().flatten().map(|r| r.value).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct SmootherOutput {
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Lower factor `L` with `L L' = m` for a symmetric PSD matrix; falls back
/// to an eigen-decomposition with clamped eigenvalues when `m` is singular.
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.unpack();
    }
    let eig = m.clone().symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

/// Covariance recursions; they do not depend on observed values, so one pass
/// serves any number of mean passes.
struct CovarianceTrace {
    predicted: Vec<DMatrix<f64>>,
    filtered: Vec<DMatrix<f64>>,
    /// Per epoch, per row: Kalman gain and innovation variance.
    gains: Vec<Vec<(DVector<f64>, f64)>>,
}

fn covariance_pass(ssm: &LinearGaussianSsm) -> Result<CovarianceTrace> {
    let n = ssm.n_epochs();
    let r = ssm.state_dim;
    let mut predicted = Vec::with_capacity(n);
    let mut filtered = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    let identity = DMatrix::<f64>::identity(r, r);
    let mut p = ssm.initial_cov.clone();
    symmetrize(&mut p);
    for j in 0..n {
        if j > 0 {
            let step = &ssm.steps[j - 1];
            p = &step.transition * &p * step.transition.transpose() + &step.noise;
            symmetrize(&mut p);
        }
        predicted.push(p.clone());
        let mut epoch_gains = Vec::with_capacity(ssm.rows[j].len());
        for row in &ssm.rows[j] {
            let pf = &p * &row.loading;
            let s = row.loading.dot(&pf) + row.variance;
            if !(s > 0.0) || !s.is_finite() {
                return Err(numerical(format!(
                    "non-positive innovation variance {s:e} at epoch {j}"
                )));
            }
            let k = pf / s;
            let l = &identity - &k * row.loading.transpose();
            p = &l * &p * l.transpose() + (&k * k.transpose()) * row.variance;
            symmetrize(&mut p);
            epoch_gains.push((k, s));
        }
        filtered.push(p.clone());
        gains.push(epoch_gains);
    }
    Ok(CovarianceTrace {
        predicted,
        filtered,
        gains,
    })
}

/// `J_j = P_{j|j} G_j' P_{j+1|j}^{-1}` for every step.
fn smoothing_gains(ssm: &LinearGaussianSsm, trace: &CovarianceTrace) -> Result<Vec<DMatrix<f64>>> {
    ssm.steps
        .iter()
        .enumerate()
        .map(|(j, step)| {
            let rhs = &step.transition * &trace.filtered[j];
            let pred = &trace.predicted[j + 1];
            let x = match Cholesky::new(pred.clone()) {
                Some(c) => c.solve(&rhs),
                None => {
                    let pinv = pred
                        .clone()
                        .pseudo_inverse(1e-14 * pred.amax().max(f64::MIN_POSITIVE))
                        .map_err(|e| numerical(format!("smoother gain at step {j}: {e}")))?;
                    pinv * rhs
                }
            };
            Ok(x.transpose())
        })
        .collect()
}

struct MeanTrace {
    predicted: Vec<DVector<f64>>,
    filtered: Vec<DVector<f64>>,
    log_likelihood: f64,
}

/// Forward mean recursion for the given row values (in row order).
fn mean_pass(
    ssm: &LinearGaussianSsm,
    trace: &CovarianceTrace,
    values: &[f64],
    initial_mean: &DVector<f64>,
) -> MeanTrace {
    let n = ssm.n_epochs();
    let mut predicted = Vec::with_capacity(n);
    let mut filtered = Vec::with_capacity(n);
    let mut ll = 0.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut a = initial_mean.clone();
    let mut idx = 0;
    for j in 0..n {
        if j > 0 {
            a = &ssm.steps[j - 1].transition * &a;
        }
        predicted.push(a.clone());
        for (row, (k, s)) in ssm.rows[j].iter().zip(&trace.gains[j]) {
            let v = values[idx] - row.loading.dot(&a);
            idx += 1;
            a.axpy(v, k, 1.0);
            ll -= 0.5 * (ln2pi + s.ln() + v * v / s);
        }
        filtered.push(a.clone());
    }
    MeanTrace {
        predicted,
        filtered,
        log_likelihood: ll,
    }
}

fn backward_means(gains: &[DMatrix<f64>], means: &MeanTrace) -> Vec<DVector<f64>> {
    let n = means.filtered.len();
    let mut out = vec![DVector::zeros(0); n];
    out[n - 1] = means.filtered[n - 1].clone();
    for j in (0..n - 1).rev() {
        let diff = &out[j + 1] - &means.predicted[j + 1];
        out[j] = &means.filtered[j] + &gains[j] * diff;
    }
    out
}

pub fn kalman_filter(ssm: &LinearGaussianSsm) -> Result<FilterOutput> {
    let trace = covariance_pass(ssm)?;
    let means = mean_pass(ssm, &trace, &ssm.observed_values(), &ssm.initial_mean);
    Ok(FilterOutput {
        predicted_means: means.predicted,
        predicted_covs: trace.predicted,
        filtered_means: means.filtered,
        filtered_covs: trace.filtered,
        log_likelihood: means.log_likelihood,
    })
}

pub fn kalman_smooth(ssm: &LinearGaussianSsm) -> Result<SmootherOutput> {
    let trace = covariance_pass(ssm)?;
    let gains = smoothing_gains(ssm, &trace)?;
    let means = mean_pass(ssm, &trace, &ssm.observed_values(), &ssm.initial_mean);
    let smoothed_means = backward_means(&gains, &means);

    let n = ssm.n_epochs();
    let mut smoothed_covs = vec![DMatrix::zeros(0, 0); n];
    smoothed_covs[n - 1] = trace.filtered[n - 1].clone();
    for j in (0..n - 1).rev() {
        let diff = &smoothed_covs[j + 1] - &trace.predicted[j + 1];
        let mut c = &trace.filtered[j] + &gains[j] * diff * gains[j].transpose();
        symmetrize(&mut c);
        smoothed_covs[j] = c;
    }
    Ok(SmootherOutput {
        filtered_means: means.filtered,
        filtered_covs: trace.filtered,
        smoothed_means,
        smoothed_covs,
        log_likelihood: means.log_likelihood,
    })
}

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// One draw of all states from their joint distribution given all
/// observations (mean-correction simulation smoother).
///
/// An unconditional path `x+` and pseudo-observations `y+` are simulated;
/// the draw is `x+ + E[x | y - y+]` with the smoothed mean taken under a zero
/// initial mean, which equals `x+ - E[x | y+] + E[x | y]`.
pub fn simulation_smoother<R: Rng + ?Sized>(
    ssm: &LinearGaussianSsm,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let trace = covariance_pass(ssm)?;
    let gains = smoothing_gains(ssm, &trace)?;
    let r = ssm.state_dim;
    let n = ssm.n_epochs();

    let mut path = Vec::with_capacity(n);
    let mut x = &ssm.initial_mean + psd_factor(&ssm.initial_cov) * standard_normal_vec(rng, r);
    let mut diff = Vec::with_capacity(ssm.rows.iter().map(Vec::len).sum());
    for j in 0..n {
        if j > 0 {
            let step = &ssm.steps[j - 1];
            x = &step.transition * &x + psd_factor(&step.noise) * standard_normal_vec(rng, r);
        }
        for row in &ssm.rows[j] {
            let e: f64 = rng.sample(StandardNormal);
            let pseudo = row.loading.dot(&x) + row.variance.sqrt() * e;
            diff.push(row.value - pseudo);
        }
        path.push(x.clone());
    }

    let means = mean_pass(ssm, &trace, &diff, &DVector::zeros(r));
    let correction = backward_means(&gains, &means);
    Ok(path
        .into_iter()
        .zip(correction)
        .map(|(x, c)| x + c)
        .collect())
}
