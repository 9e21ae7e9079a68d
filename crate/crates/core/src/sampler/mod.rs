//! Posterior sampling for the stochastic volatility regression model.
//!
//! One sweep updates, in order: (1) every subject's deviation states,
//! (2) every group's mean states, (3a) the measurement-error variance,
//! (3b) the initial-state variance of the deviations, (3c) the group
//! volatilities, (3d) the subject volatilities by Metropolis-Hastings, and
//! (4) the log-volatility regression `(beta, sigma^2)`.
//!
//! Group mean states live on `{0} ∪ merged grid`; subject deviation states on
//! `{0} ∪ subject times`. Epoch 0 carries the initial-state priors.

mod conditionals;
mod summary;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid, Result, SvrError};
use crate::rng::{substream, StreamRng};
use crate::smoother::{kalman_smooth, simulation_smoother, LinearGaussianSsm};
use crate::statespace::Transition;

pub use conditionals::{
    chi_squared, ln_increment_density, ln_lognormal_pdf, mh_step, InverseGamma, MhOutcome,
    VolatilityTarget,
};
pub use summary::{
    hpd_interval, kde_mode, mean_sd, summarize_values, ParameterSummary, HPD_MASS,
    MIN_SUMMARY_DRAWS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Order of the mean-curve SDE.
    pub p: usize,
    /// Order of the deviation SDE.
    pub q: usize,
    /// Inverse-gamma prior shape.
    pub a: f64,
    /// Inverse-gamma prior scale.
    pub b: f64,
    /// Prior variance of the mean-curve initial states.
    pub sigma2_m0: f64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            p: 2,
            q: 1,
            a: 0.01,
            b: 0.01,
            sigma2_m0: 1e4,
            n_iter: 15_000,
            burn_in: 5_000,
            thin: 5,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(invalid("SDE orders p and q must be at least 1"));
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(invalid("prior shape a and scale b must be positive"));
        }
        if !(self.sigma2_m0 > 0.0) {
            return Err(invalid("sigma2_m0 must be positive"));
        }
        if self.n_iter == 0 || self.thin == 0 {
            return Err(invalid("n_iter and thin must be positive"));
        }
        if self.burn_in >= self.n_iter {
            return Err(invalid("burn_in must be smaller than n_iter"));
        }
        Ok(())
    }

    /// `floor((n_iter - burn_in) / thin)`.
    pub fn retained_count(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    /// Whether 0-based iteration `it` is kept.
    pub fn is_retained(&self, it: usize) -> bool {
        it >= self.burn_in && (it - self.burn_in + 1).is_multiple_of(self.thin)
    }
}

/// Which conditional updates a sweep performs. Disabled components keep
/// their current value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Updates {
    pub deviations: bool,
    pub means: bool,
    pub sigma2_eps: bool,
    pub sigma2_u0: bool,
    pub sigma2_m: bool,
    pub sigma2_u: bool,
    pub regression: bool,
}

impl Default for Updates {
    fn default() -> Self {
        Self {
            deviations: true,
            means: true,
            sigma2_eps: true,
            sigma2_u0: true,
            sigma2_m: true,
            sigma2_u: true,
            regression: true,
        }
    }
}

impl Updates {
    /// Only the latent curves are sampled; all variances stay fixed.
    pub fn curves_only() -> Self {
        Self {
            deviations: true,
            means: true,
            sigma2_eps: false,
            sigma2_u0: false,
            sigma2_m: false,
            sigma2_u: false,
            regression: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// `[group][epoch]`, `p`-vectors on `{0} ∪ merged grid`.
    pub m_states: Vec<Vec<DVector<f64>>>,
    /// `[subject][epoch]`, `q`-vectors on `{0} ∪ subject times`.
    pub u_states: Vec<Vec<DVector<f64>>>,
    pub sigma2_eps: f64,
    pub sigma2_u0: f64,
    /// Residual variance of the log-volatility regression.
    pub sigma2: f64,
    pub sigma2_m: Vec<f64>,
    pub sigma2_u: Vec<f64>,
    pub beta: DVector<f64>,
}

impl ChainState {
    /// `M_{k_i}(t_ij)` for every observation of subject `i`.
    pub fn mean_at_obs(&self, data: &Dataset, i: usize) -> Vec<f64> {
        let k = data.subjects()[i].group - 1;
        data.grid_index(i)
            .iter()
            .map(|&g| self.m_states[k][g + 1][0])
            .collect()
    }

    /// `U_i(t_ij)` for every observation of subject `i`.
    pub fn deviation_at_obs(&self, i: usize) -> Vec<f64> {
        self.u_states[i][1..].iter().map(|u| u[0]).collect()
    }

    /// `M + U` at subject `i`'s observation times.
    pub fn trajectory(&self, data: &Dataset, i: usize) -> Vec<f64> {
        self.mean_at_obs(data, i)
            .into_iter()
            .zip(self.deviation_at_obs(i))
            .map(|(m, u)| m + u)
            .collect()
    }

    fn check_positive(&self) -> Result<()> {
        let ok = self.sigma2_eps > 0.0
            && self.sigma2_u0 > 0.0
            && self.sigma2 > 0.0
            && self.sigma2_m.iter().all(|v| *v > 0.0)
            && self.sigma2_u.iter().all(|v| *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(invalid("variance components must be strictly positive"))
        }
    }
}

/// Metropolis-Hastings bookkeeping for the subject volatilities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcceptanceStats {
    pub proposed: Vec<u64>,
    pub accepted: Vec<u64>,
    pub non_finite: u64,
}

impl AcceptanceStats {
    pub fn new(m: usize) -> Self {
        Self {
            proposed: vec![0; m],
            accepted: vec![0; m],
            non_finite: 0,
        }
    }

    pub fn record(&mut self, i: usize, outcome: MhOutcome) {
        self.proposed[i] += 1;
        match outcome {
            MhOutcome::Accepted => self.accepted[i] += 1,
            MhOutcome::Rejected => {}
            MhOutcome::NonFinite => self.non_finite += 1,
        }
    }

    pub fn overall_rate(&self) -> f64 {
        let p: u64 = self.proposed.iter().sum();
        if p == 0 {
            return f64::NAN;
        }
        self.accepted.iter().sum::<u64>() as f64 / p as f64
    }
}

/// One retained draw: scalar parameters and the curves at the observation
/// points (subjects concatenated in dataset order).
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedDraw {
    pub sigma2_eps: f64,
    pub sigma2_u0: f64,
    pub sigma2: f64,
    pub sigma2_m: Vec<f64>,
    pub sigma2_u: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean_obs: Vec<f64>,
    pub dev_obs: Vec<f64>,
}

impl RetainedDraw {
    fn capture(state: &ChainState, data: &Dataset) -> Self {
        let mut mean_obs = Vec::with_capacity(data.total_obs());
        let mut dev_obs = Vec::with_capacity(data.total_obs());
        for i in 0..data.n_subjects() {
            mean_obs.extend(state.mean_at_obs(data, i));
            dev_obs.extend(state.deviation_at_obs(i));
        }
        Self {
            sigma2_eps: state.sigma2_eps,
            sigma2_u0: state.sigma2_u0,
            sigma2: state.sigma2,
            sigma2_m: state.sigma2_m.clone(),
            sigma2_u: state.sigma2_u.clone(),
            beta: state.beta.iter().copied().collect(),
            mean_obs,
            dev_obs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub draws: Vec<RetainedDraw>,
    /// 0-based iteration index of each retained draw.
    pub iterations: Vec<usize>,
    pub acceptance: AcceptanceStats,
    /// State after the last sweep.
    pub final_state: ChainState,
    /// Start of each subject's block in `mean_obs` / `dev_obs`.
    offsets: Vec<usize>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    fn block(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Scalar parameters as named columns: `sigma2_eps`, `sigma2_u0`,
    /// `sigma2`, `sigma2_m[k]`, `sigma2_u[i]` (1-based), `beta[l]` (0-based).
    pub fn scalar_columns(&self) -> Vec<(String, Vec<f64>)> {
        let Some(first) = self.draws.first() else {
            return Vec::new();
        };
        let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
        let mut push = |name: String, f: &dyn Fn(&RetainedDraw) -> f64| {
            cols.push((name, self.draws.iter().map(f).collect()));
        };
        push("sigma2_eps".into(), &|s| s.sigma2_eps);
        push("sigma2_u0".into(), &|s| s.sigma2_u0);
        push("sigma2".into(), &|s| s.sigma2);
        for k in 0..first.sigma2_m.len() {
            push(format!("sigma2_m[{}]", k + 1), &|s| s.sigma2_m[k]);
        }
        for i in 0..first.sigma2_u.len() {
            push(format!("sigma2_u[{}]", i + 1), &|s| s.sigma2_u[i]);
        }
        for l in 0..first.beta.len() {
            push(format!("beta[{l}]"), &|s| s.beta[l]);
        }
        cols
    }

    /// Per-draw `M + U` of subject `i`: `[draw][obs]`.
    pub fn trajectory_draws(&self, i: usize) -> Vec<Vec<f64>> {
        let r = self.block(i);
        self.draws
            .iter()
            .map(|d| {
                d.mean_obs[r.clone()]
                    .iter()
                    .zip(&d.dev_obs[r.clone()])
                    .map(|(m, u)| m + u)
                    .collect()
            })
            .collect()
    }

    fn mean_over(&self, f: impl Fn(&RetainedDraw) -> Vec<f64>) -> Vec<f64> {
        let mut acc: Vec<f64> = Vec::new();
        for d in &self.draws {
            let v = f(d);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
        let n = self.draws.len() as f64;
        acc.into_iter().map(|a| a / n).collect()
    }

    pub fn mean_group_curve(&self, i: usize) -> Vec<f64> {
        let r = self.block(i);
        self.mean_over(|d| d.mean_obs[r.clone()].to_vec())
    }

    pub fn mean_deviation(&self, i: usize) -> Vec<f64> {
        let r = self.block(i);
        self.mean_over(|d| d.dev_obs[r.clone()].to_vec())
    }

    pub fn mean_trajectory(&self, i: usize) -> Vec<f64> {
        self.mean_group_curve(i)
            .into_iter()
            .zip(self.mean_deviation(i))
            .map(|(m, u)| m + u)
            .collect()
    }

    pub fn mean_volatilities(&self) -> Vec<f64> {
        self.mean_over(|d| d.sigma2_u.clone())
    }

    pub fn mean_beta(&self) -> Vec<f64> {
        self.mean_over(|d| d.beta.clone())
    }
}

/// Posterior summary of every scalar parameter. Needs at least
/// [`MIN_SUMMARY_DRAWS`] draws.
pub fn summarize(draws: &PosteriorDraws) -> Result<Vec<ParameterSummary>> {
    if draws.len() < MIN_SUMMARY_DRAWS {
        return Err(invalid(format!(
            "summaries need at least {MIN_SUMMARY_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    summarize_columns(&draws.scalar_columns())
}

pub fn summarize_columns(columns: &[(String, Vec<f64>)]) -> Result<Vec<ParameterSummary>> {
    columns
        .iter()
        .map(|(name, v)| summarize_values(name, v))
        .collect()
}

/// Least-squares design for the log-volatility regression.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    x: DMatrix<f64>,
    xtx_chol: Cholesky<f64, Dyn>,
}

impl RegressionDesign {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let (m, k) = x.shape();
        if k == 0 || m <= k {
            return Err(invalid(format!(
                "regression needs more subjects than covariates (m = {m}, k = {k})"
            )));
        }
        let xtx = x.transpose() * &x;
        let chol = Cholesky::new(xtx.clone())
            .ok_or_else(|| invalid("covariate matrix is not of full column rank"))?;
        let diag = chol.l_dirty().diagonal();
        let scale = xtx.diagonal().max().sqrt();
        if diag.min() <= 1e-10 * scale {
            return Err(invalid("covariate matrix is not of full column rank"));
        }
        Ok(Self { x, xtx_chol: chol })
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// `(beta_hat, residual sum of squares)`.
    pub fn least_squares(&self, z: &DVector<f64>) -> (DVector<f64>, f64) {
        let beta_hat = self.xtx_chol.solve(&(self.x.transpose() * z));
        let resid = z - &self.x * &beta_hat;
        (beta_hat, resid.norm_squared())
    }

    /// Draw from the Jeffreys-prior posterior of `(beta, sigma^2)`:
    /// `sigma^2 = RSS / tau`, `tau ~ chi^2(m - k)`, then
    /// `beta ~ N(beta_hat, sigma^2 (X'X)^-1)`.
    pub fn sample<R: Rng + ?Sized>(&self, z: &DVector<f64>, rng: &mut R) -> (DVector<f64>, f64) {
        let (m, k) = self.x.shape();
        let (beta_hat, rss) = self.least_squares(z);
        let tau = chi_squared((m - k) as f64, rng);
        let sigma2 = rss / tau;
        let noise = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let offset = self
            .xtx_chol
            .l_dirty()
            .transpose()
            .solve_upper_triangular(&noise)
            .expect("nonsingular factor");
        (beta_hat + offset * sigma2.sqrt(), sigma2)
    }
}

// Substream tags.
const STEP_DEVIATIONS: u64 = 1;
const STEP_MEANS: u64 = 2;
const STEP_SIGMA_EPS: u64 = 3;
const STEP_SIGMA_U0: u64 = 4;
const STEP_SIGMA_M: u64 = 5;
const STEP_SIGMA_U: u64 = 6;
const STEP_REGRESSION: u64 = 7;
const STEP_INIT: u64 = 8;

/// Precomputed geometry and configuration of one chain.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    config: ModelConfig,
    data: &'a Dataset,
    updates: Updates,
    grid_epochs: Vec<f64>,
    grid_transitions: Vec<Transition>,
    subject_epochs: Vec<Vec<f64>>,
    subject_transitions: Vec<Vec<Transition>>,
    design: Option<RegressionDesign>,
}

fn with_epoch_zero(times: &[f64]) -> Vec<f64> {
    std::iter::once(0.0).chain(times.iter().copied()).collect()
}

impl<'a> Sampler<'a> {
    pub fn new(config: ModelConfig, data: &'a Dataset) -> Result<Self> {
        Self::with_updates(config, data, Updates::default())
    }

    /// The regression design is validated only when the regression update
    /// is enabled.
    pub fn with_updates(config: ModelConfig, data: &'a Dataset, updates: Updates) -> Result<Self> {
        config.validate()?;
        let grid_epochs = with_epoch_zero(data.merged_grid());
        let grid_transitions = Transition::chain(config.p, &grid_epochs)?;
        let subject_epochs: Vec<Vec<f64>> = data
            .subjects()
            .iter()
            .map(|s| with_epoch_zero(&s.times))
            .collect();
        let subject_transitions = subject_epochs
            .iter()
            .map(|e| Transition::chain(config.q, e))
            .collect::<Result<Vec<_>>>()?;
        let design = if updates.regression {
            Some(RegressionDesign::new(data.design_matrix())?)
        } else {
            None
        };
        Ok(Self {
            config,
            data,
            updates,
            grid_epochs,
            grid_transitions,
            subject_epochs,
            subject_transitions,
            design,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn grid_epochs(&self) -> &[f64] {
        &self.grid_epochs
    }

    pub fn subject_epochs(&self, i: usize) -> &[f64] {
        &self.subject_epochs[i]
    }

    fn mean_ssm(&self, state: &ChainState, k: usize) -> Result<LinearGaussianSsm> {
        let p = self.config.p;
        let mut ssm = LinearGaussianSsm::from_transitions(
            self.grid_epochs.clone(),
            &self.grid_transitions,
            state.sigma2_m[k],
            DVector::zeros(p),
            DMatrix::identity(p, p) * self.config.sigma2_m0,
        )?;
        for i in self.data.group_members(k + 1) {
            let s = &self.data.subjects()[i];
            for (j, &g) in self.data.grid_index(i).iter().enumerate() {
                let y = s.values[j] - state.u_states[i][j + 1][0];
                ssm.observe_level(g + 1, y, state.sigma2_eps)?;
            }
        }
        Ok(ssm)
    }

    fn deviation_ssm(&self, state: &ChainState, i: usize) -> Result<LinearGaussianSsm> {
        let q = self.config.q;
        let mut ssm = LinearGaussianSsm::from_transitions(
            self.subject_epochs[i].clone(),
            &self.subject_transitions[i],
            state.sigma2_u[i],
            DVector::zeros(q),
            DMatrix::identity(q, q) * state.sigma2_u0,
        )?;
        let s = &self.data.subjects()[i];
        let m = state.mean_at_obs(self.data, i);
        for (j, (y, mm)) in s.values.iter().zip(&m).enumerate() {
            ssm.observe_level(j + 1, y - mm, state.sigma2_eps)?;
        }
        Ok(ssm)
    }

    /// Starting point: unit variances, zero regression, zero deviations and
    /// group means at their smoothed values given those variances.
    pub fn initial_state(&self) -> Result<ChainState> {
        let (p, q) = (self.config.p, self.config.q);
        let g = self.data.n_groups();
        let m = self.data.n_subjects();
        let k = self.data.n_covariates();
        let mut state = ChainState {
            m_states: vec![vec![DVector::zeros(p); self.grid_epochs.len()]; g],
            u_states: self
                .subject_epochs
                .iter()
                .map(|e| vec![DVector::zeros(q); e.len()])
                .collect(),
            sigma2_eps: 1.0,
            sigma2_u0: 1.0,
            sigma2: 1.0,
            sigma2_m: vec![1.0; g],
            sigma2_u: vec![1.0; m],
            beta: DVector::zeros(k),
        };
        for kk in 0..g {
            state.m_states[kk] = kalman_smooth(&self.mean_ssm(&state, kk)?)?.smoothed_means;
        }
        Ok(state)
    }

    /// Step (1) for one subject: a simulation-smoother draw of `U_i` given
    /// the current mean curve and variances.
    pub fn sample_deviation<R: Rng + ?Sized>(
        &self,
        state: &ChainState,
        i: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        simulation_smoother(&self.deviation_ssm(state, i)?, rng)
    }

    /// Step (2) for one group (0-based `k`).
    pub fn sample_mean<R: Rng + ?Sized>(
        &self,
        state: &ChainState,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        simulation_smoother(&self.mean_ssm(state, k)?, rng)
    }

    /// Step (1) for all subjects using per-subject substreams of `iteration`.
    pub fn sample_u(&self, state: &mut ChainState, iteration: u64) -> Result<()> {
        let seed = self.config.seed;
        let draws: Vec<Result<Vec<DVector<f64>>>> = (0..self.data.n_subjects())
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(seed, iteration, STEP_DEVIATIONS, i as u64);
                self.sample_deviation(state, i, &mut rng).map_err(|e| {
                    invalid(format!("subject {}: {e}", self.data.subjects()[i].id))
                })
            })
            .collect();
        for (i, d) in draws.into_iter().enumerate() {
            state.u_states[i] = d?;
        }
        Ok(())
    }

    /// Step (2) for all groups.
    pub fn sample_m(&self, state: &mut ChainState, iteration: u64) -> Result<()> {
        for k in 0..self.data.n_groups() {
            let mut rng = substream(self.config.seed, iteration, STEP_MEANS, k as u64);
            state.m_states[k] = self
                .sample_mean(state, k, &mut rng)
                .map_err(|e| invalid(format!("group {}: {e}", k + 1)))?;
        }
        Ok(())
    }

    /// Step (3a) conditional: `IG(a + N/2, b + RSS/2)`.
    pub fn sigma_eps_conditional(&self, state: &ChainState) -> Result<InverseGamma> {
        let mut rss = 0.0;
        for (i, s) in self.data.subjects().iter().enumerate() {
            for (y, f) in s.values.iter().zip(state.trajectory(self.data, i)) {
                rss += (y - f) * (y - f);
            }
        }
        InverseGamma::new(
            self.config.a + 0.5 * self.data.total_obs() as f64,
            self.config.b + 0.5 * rss,
        )
    }

    /// Step (3b) conditional: `IG(a + mq/2, b + sum_i |U_i0|^2 / 2)`.
    pub fn sigma_u0_conditional(&self, state: &ChainState) -> Result<InverseGamma> {
        let ss: f64 = state.u_states.iter().map(|u| u[0].norm_squared()).sum();
        InverseGamma::new(
            self.config.a + 0.5 * (self.data.n_subjects() * self.config.q) as f64,
            self.config.b + 0.5 * ss,
        )
    }

    /// Step (3c) conditional for 0-based group `k`:
    /// `IG(a + np/2, b + sum_j d_j' W_j^-1 d_j / 2)` over the merged grid.
    pub fn sigma_m_conditional(&self, state: &ChainState, k: usize) -> Result<InverseGamma> {
        let quad = quadratic_form(&self.grid_transitions, &state.m_states[k])?;
        let n = self.grid_transitions.len();
        InverseGamma::new(
            self.config.a + 0.5 * (n * self.config.p) as f64,
            self.config.b + 0.5 * quad,
        )
    }

    /// Inputs of the step (3d) update for subject `i`, with the proposal
    /// `IG(a + n_i q/2, b_Ui)`.
    pub fn volatility_target(&self, state: &ChainState, i: usize) -> Result<VolatilityTarget> {
        let quad = quadratic_form(&self.subject_transitions[i], &state.u_states[i])?;
        let total_dim = (self.subject_transitions[i].len() * self.config.q) as f64;
        let x = &self.data.subjects()[i].covariates;
        let prior_mean = x.iter().zip(state.beta.iter()).map(|(a, b)| a * b).sum();
        Ok(VolatilityTarget {
            prior_mean,
            prior_var: state.sigma2,
            quad,
            total_dim,
            proposal: InverseGamma::new(
                self.config.a + 0.5 * total_dim,
                self.config.b + 0.5 * quad,
            )?,
        })
    }

    pub fn sample_sigma_eps<R: Rng + ?Sized>(&self, state: &ChainState, rng: &mut R) -> Result<f64> {
        Ok(self.sigma_eps_conditional(state)?.sample(rng))
    }

    pub fn sample_sigma_u0<R: Rng + ?Sized>(&self, state: &ChainState, rng: &mut R) -> Result<f64> {
        Ok(self.sigma_u0_conditional(state)?.sample(rng))
    }

    pub fn sample_sigma_m<R: Rng + ?Sized>(
        &self,
        state: &ChainState,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        (0..self.data.n_groups())
            .map(|k| Ok(self.sigma_m_conditional(state, k)?.sample(rng)))
            .collect()
    }

    /// Step (3d) for subject `i`: one independence Metropolis-Hastings move.
    pub fn sample_sigma_u_mh<R: Rng + ?Sized>(
        &self,
        state: &ChainState,
        i: usize,
        rng: &mut R,
    ) -> Result<(f64, MhOutcome)> {
        let target = self.volatility_target(state, i)?;
        Ok(mh_step(&target, state.sigma2_u[i], rng))
    }

    /// Step (4): `(beta, sigma^2)` given the subject volatilities.
    pub fn sample_beta_sigma2<R: Rng + ?Sized>(
        &self,
        state: &ChainState,
        rng: &mut R,
    ) -> Result<(DVector<f64>, f64)> {
        let design = match &self.design {
            Some(d) => d,
            None => &RegressionDesign::new(self.data.design_matrix())?,
        };
        let z = DVector::from_iterator(state.sigma2_u.len(), state.sigma2_u.iter().map(|v| v.ln()));
        Ok(design.sample(&z, rng))
    }

    fn wrap(iteration: usize, component: &str) -> impl Fn(SvrError) -> SvrError + '_ {
        move |e| SvrError::Sampler {
            iteration,
            component: component.to_string(),
            source: Box::new(e),
        }
    }

    /// One full sweep at 0-based `iteration`.
    pub fn sweep(
        &self,
        state: &mut ChainState,
        iteration: usize,
        stats: &mut AcceptanceStats,
    ) -> Result<()> {
        let it = iteration as u64;
        let seed = self.config.seed;
        let up = self.updates;
        if up.deviations {
            self.sample_u(state, it).map_err(Self::wrap(iteration, "deviations"))?;
        }
        if up.means {
            self.sample_m(state, it).map_err(Self::wrap(iteration, "group means"))?;
        }
        if up.sigma2_eps {
            let mut rng = substream(seed, it, STEP_SIGMA_EPS, 0);
            state.sigma2_eps = self
                .sample_sigma_eps(state, &mut rng)
                .map_err(Self::wrap(iteration, "sigma2_eps"))?;
        }
        if up.sigma2_u0 {
            let mut rng = substream(seed, it, STEP_SIGMA_U0, 0);
            state.sigma2_u0 = self
                .sample_sigma_u0(state, &mut rng)
                .map_err(Self::wrap(iteration, "sigma2_u0"))?;
        }
        if up.sigma2_m {
            let mut rng = substream(seed, it, STEP_SIGMA_M, 0);
            state.sigma2_m = self
                .sample_sigma_m(state, &mut rng)
                .map_err(Self::wrap(iteration, "sigma2_m"))?;
        }
        if up.sigma2_u {
            for i in 0..self.data.n_subjects() {
                let mut rng: StreamRng = substream(seed, it, STEP_SIGMA_U, i as u64);
                let (v, outcome) = self
                    .sample_sigma_u_mh(state, i, &mut rng)
                    .map_err(Self::wrap(iteration, "sigma2_u"))?;
                state.sigma2_u[i] = v;
                stats.record(i, outcome);
            }
        }
        if up.regression {
            let mut rng = substream(seed, it, STEP_REGRESSION, 0);
            let (beta, sigma2) = self
                .sample_beta_sigma2(state, &mut rng)
                .map_err(Self::wrap(iteration, "regression"))?;
            state.beta = beta;
            state.sigma2 = sigma2;
        }
        state.check_positive().map_err(Self::wrap(iteration, "state"))
    }

    /// Runs the chain from [`Sampler::initial_state`].
    pub fn run(&self) -> Result<PosteriorDraws> {
        let state = self.initial_state().map_err(Self::wrap(0, "initialization"))?;
        self.run_from(state)
    }

    pub fn run_from(&self, mut state: ChainState) -> Result<PosteriorDraws> {
        let mut stats = AcceptanceStats::new(self.data.n_subjects());
        let mut draws = Vec::with_capacity(self.config.retained_count());
        let mut iterations = Vec::with_capacity(self.config.retained_count());
        for it in 0..self.config.n_iter {
            self.sweep(&mut state, it, &mut stats)?;
            if self.config.is_retained(it) {
                draws.push(RetainedDraw::capture(&state, self.data));
                iterations.push(it);
            }
        }
        let mut offsets = vec![0];
        for s in self.data.subjects() {
            offsets.push(offsets.last().unwrap() + s.n_obs());
        }
        Ok(PosteriorDraws {
            draws,
            iterations,
            acceptance: stats,
            final_state: state,
            offsets,
        })
    }

    /// Random substream reserved for callers that need extra randomness tied
    /// to this chain (e.g. simulation-based checks).
    pub fn auxiliary_rng(&self, index: u64) -> StreamRng {
        substream(self.config.seed, u64::MAX, STEP_INIT, index)
    }
}

/// `sum_j (x_{j+1} - G_j x_j)' W_j^-1 (x_{j+1} - G_j x_j)`.
pub fn quadratic_form(transitions: &[Transition], states: &[DVector<f64>]) -> Result<f64> {
    if states.len() != transitions.len() + 1 {
        return Err(invalid("state path length does not match transitions"));
    }
    transitions
        .iter()
        .enumerate()
        .map(|(j, t)| t.noise_quadratic_form(&t.innovation(&states[j], &states[j + 1])))
        .sum()
}

/// Validates the dataset's fitting contract and runs one chain.
pub fn run_chain(config: &ModelConfig, data: &Dataset) -> Result<PosteriorDraws> {
    data.check_fit_ready()?;
    Sampler::new(config.clone(), data)?.run()
}
