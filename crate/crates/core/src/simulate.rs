//! Synthetic studies, error metrics and the two-stage baseline.
//!
//! Case I draws curves from the model itself with covariate-dependent
//! subject volatilities. Case II uses fixed smooth group curves plus random
//! cosine/sine loadings, so volatility is homogeneous and the regression has
//! no signal.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, Subject};
use crate::error::{invalid, Result};
use crate::rng::StreamRng;
use crate::smoother::psd_factor;
use crate::spline::ncs_fit;
use crate::statespace::Transition;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimCase {
    One,
    Two,
}

impl SimCase {
    pub fn number(self) -> u32 {
        match self {
            SimCase::One => 1,
            SimCase::Two => 2,
        }
    }
}

/// Knobs shared by both cases. The defaults reproduce the published study.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub n_subjects: usize,
    pub n_groups: usize,
    /// Grid spacing; the grid is `step, 2 step, ..., n_grid step`.
    pub grid_step: f64,
    pub n_grid: usize,
    /// Probability that a grid point is kept.
    pub retain_prob: f64,
    pub sigma2_eps: f64,
    /// Case I only.
    pub beta: Vec<f64>,
    /// Case I only, per group.
    pub sigma2_m: Vec<f64>,
    /// Residual variance of the log volatilities (Case I).
    pub sigma2: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            n_groups: 2,
            grid_step: 0.2,
            n_grid: 20,
            retain_prob: 0.8,
            sigma2_eps: 1.0,
            beta: vec![0.0, 0.6, 2.0],
            sigma2_m: vec![10.0, 10.0],
            sigma2: 1.0,
        }
    }
}

impl SimParams {
    pub fn with_subjects(m: usize) -> Self {
        Self {
            n_subjects: m,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_groups == 0 || self.n_grid < 2 {
            return Err(invalid("need subjects, groups and at least 2 grid points"));
        }
        if !(self.grid_step > 0.0) || !(0.0..=1.0).contains(&self.retain_prob) {
            return Err(invalid("grid step must be positive and retain_prob in [0, 1]"));
        }
        if self.retain_prob == 0.0 {
            return Err(invalid("retain_prob = 0 leaves no observations"));
        }
        if !(self.sigma2_eps >= 0.0) || !(self.sigma2 >= 0.0) {
            return Err(invalid("variances must be nonnegative"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        (1..=self.n_grid).map(|j| j as f64 * self.grid_step).collect()
    }
}

/// Ground truth of one simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub case: SimCase,
    pub grid: Vec<f64>,
    /// Group curves on the full grid, `[group][grid]`.
    pub m_grid: Vec<Vec<f64>>,
    /// Subject deviations on the full grid, `[subject][grid]`.
    pub u_grid: Vec<Vec<f64>>,
    /// Indices into `grid` of each subject's retained points.
    pub kept: Vec<Vec<usize>>,
    pub groups: Vec<usize>,
    /// `m x k` covariate matrix with leading ones.
    pub covariates: DMatrix<f64>,
    /// Subject volatilities (Case I).
    pub sigma2_u: Option<Vec<f64>>,
    /// Regression coefficients (Case I).
    pub beta: Option<Vec<f64>>,
}

impl SimTruth {
    /// `M_{k_i}` at subject `i`'s observation times.
    pub fn mean_at_obs(&self, i: usize) -> Vec<f64> {
        let k = self.groups[i] - 1;
        self.kept[i].iter().map(|&j| self.m_grid[k][j]).collect()
    }

    /// `U_i` at subject `i`'s observation times.
    pub fn deviation_at_obs(&self, i: usize) -> Vec<f64> {
        self.kept[i].iter().map(|&j| self.u_grid[i][j]).collect()
    }

    /// `M_{k_i} + U_i` at every observation, `[subject][obs]`.
    pub fn signal(&self) -> Vec<Vec<f64>> {
        (0..self.groups.len())
            .map(|i| {
                self.mean_at_obs(i)
                    .into_iter()
                    .zip(self.deviation_at_obs(i))
                    .map(|(m, u)| m + u)
                    .collect()
            })
            .collect()
    }
}

fn normal(mean: f64, var: f64) -> Normal<f64> {
    Normal::new(mean, var.sqrt()).expect("finite nonnegative variance")
}

/// Integrated Wiener path of `order` on `grid`, started at zero at time 0;
/// returns the level.
fn wiener_path<R: Rng + ?Sized>(
    order: usize,
    diffusion_var: f64,
    grid: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut state = DVector::zeros(order);
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        let tr = Transition::new(order, t - prev)?;
        let l = psd_factor(&(tr.w() * diffusion_var));
        let z = DVector::from_iterator(order, (0..order).map(|_| rng.sample::<f64, _>(StandardNormal)));
        state = tr.g() * state + l * z;
        out.push(state[0]);
        prev = t;
    }
    Ok(out)
}

/// Retention mask with at least two points; redrawn until it has them.
fn retention_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<usize> {
    let bern = Bernoulli::new(p).expect("probability in [0, 1]");
    loop {
        let kept: Vec<usize> = (0..n).filter(|_| bern.sample(rng)).collect();
        if kept.len() >= 2 {
            return kept;
        }
    }
}

/// Group labels uniform over `1..=g`, redrawn until every group is used.
fn group_labels<R: Rng + ?Sized>(m: usize, g: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m < g {
        return Err(invalid("fewer subjects than groups"));
    }
    loop {
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(1..=g)).collect();
        if (1..=g).all(|k| labels.contains(&k)) {
            return Ok(labels);
        }
    }
}

/// `x1 ~ Bernoulli(0.4)`, `x2 ~ N(0, 0.25)`.
fn draw_covariates<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DMatrix<f64> {
    let bern = Bernoulli::new(0.4).expect("valid probability");
    let norm = normal(0.0, 0.25);
    let mut x = DMatrix::zeros(m, 3);
    for i in 0..m {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = if bern.sample(rng) { 1.0 } else { 0.0 };
        x[(i, 2)] = norm.sample(rng);
    }
    x
}

fn assemble(
    truth: &SimTruth,
    eps_var: f64,
    rng: &mut StreamRng,
) -> Result<Dataset> {
    let eps = normal(0.0, eps_var);
    let width = (truth.groups.len().max(1) as f64).log10().floor() as usize + 1;
    let subjects = (0..truth.groups.len())
        .map(|i| {
            let signal: Vec<f64> = truth
                .mean_at_obs(i)
                .into_iter()
                .zip(truth.deviation_at_obs(i))
                .map(|(m, u)| m + u)
                .collect();
            Subject {
                id: format!("s{:0width$}", i + 1),
                group: truth.groups[i],
                times: truth.kept[i].iter().map(|&j| truth.grid[j]).collect(),
                values: signal.into_iter().map(|s| s + eps.sample(rng)).collect(),
                covariates: truth.covariates.row(i).iter().copied().collect(),
            }
        })
        .collect();
    Dataset::new(subjects, truth.m_grid.len())?
        .with_covariate_names(vec!["intercept".into(), "x1".into(), "x2".into()])
}

/// Case I with the published settings and `m` subjects.
pub fn gen_case1(seed: u64, m: usize) -> Result<(Dataset, SimTruth)> {
    gen_case1_with(seed, &SimParams::with_subjects(m))
}

/// Case I: `p = 2` group curves and `q = 1` subject deviations from the SDE
/// priors started at zero, `log s2_Ui ~ N(x_i' beta, s2)`.
pub fn gen_case1_with(seed: u64, params: &SimParams) -> Result<(Dataset, SimTruth)> {
    params.validate()?;
    if params.sigma2_m.len() != params.n_groups || params.beta.len() != 3 {
        return Err(invalid("Case I needs one sigma2_m per group and three betas"));
    }
    let mut rng = StreamRng::seed_from_u64(seed);
    let grid = params.grid();
    let m = params.n_subjects;
    let m_grid = params
        .sigma2_m
        .iter()
        .map(|&v| wiener_path(2, v, &grid, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let covariates = draw_covariates(m, &mut rng);
    let mut sigma2_u = Vec::with_capacity(m);
    let mut u_grid = Vec::with_capacity(m);
    let mut kept = Vec::with_capacity(m);
    for i in 0..m {
        let mean: f64 = (0..3).map(|l| covariates[(i, l)] * params.beta[l]).sum();
        let vol = normal(mean, params.sigma2).sample(&mut rng).exp();
        sigma2_u.push(vol);
        u_grid.push(wiener_path(1, vol, &grid, &mut rng)?);
        kept.push(retention_mask(grid.len(), params.retain_prob, &mut rng));
    }
    let groups = group_labels(m, params.n_groups, &mut rng)?;
    let truth = SimTruth {
        case: SimCase::One,
        grid,
        m_grid,
        u_grid,
        kept,
        groups,
        covariates,
        sigma2_u: Some(sigma2_u),
        beta: Some(params.beta.clone()),
    };
    let data = assemble(&truth, params.sigma2_eps, &mut rng)?;
    Ok((data, truth))
}

/// Noiseless Case II curve of group `group` (1 or 2).
pub fn case2_curve(group: usize, t: f64, a1: f64, a2: f64) -> f64 {
    let (c, s) = ((std::f64::consts::PI * t / 10.0).cos(), (std::f64::consts::PI * t / 10.0).sin());
    if group == 1 {
        10.0 * (t + t.sin()) + 0.6 * a1 * c + 0.2 * a2 * s
    } else {
        10.0 * (t + t.cos()) + 0.5 * a1 * c + 0.3 * a2 * s
    }
}

/// Case II with the published settings and `m` subjects.
pub fn gen_case2(seed: u64, m: usize) -> Result<(Dataset, SimTruth)> {
    gen_case2_with(seed, &SimParams::with_subjects(m))
}

/// Case II: group curves `10(t + sin t)` / `10(t + cos t)` plus loadings
/// `a1 ~ N(0, 4)`, `a2 ~ N(0, 1)`. Covariates are drawn as in Case I but
/// carry no effect.
pub fn gen_case2_with(seed: u64, params: &SimParams) -> Result<(Dataset, SimTruth)> {
    params.validate()?;
    if params.n_groups != 2 {
        return Err(invalid("Case II has exactly two groups"));
    }
    let mut rng = StreamRng::seed_from_u64(seed);
    let grid = params.grid();
    let m = params.n_subjects;
    let m_grid: Vec<Vec<f64>> = (1..=2)
        .map(|k| grid.iter().map(|&t| case2_curve(k, t, 0.0, 0.0)).collect())
        .collect();
    let covariates = draw_covariates(m, &mut rng);
    let groups = group_labels(m, 2, &mut rng)?;
    let (n1, n2) = (normal(0.0, 4.0), normal(0.0, 1.0));
    let mut u_grid = Vec::with_capacity(m);
    let mut kept = Vec::with_capacity(m);
    for &k in &groups {
        let (a1, a2) = (n1.sample(&mut rng), n2.sample(&mut rng));
        u_grid.push(
            grid.iter()
                .map(|&t| case2_curve(k, t, a1, a2) - case2_curve(k, t, 0.0, 0.0))
                .collect(),
        );
        kept.push(retention_mask(grid.len(), params.retain_prob, &mut rng));
    }
    let truth = SimTruth {
        case: SimCase::Two,
        grid,
        m_grid,
        u_grid,
        kept,
        groups,
        covariates,
        sigma2_u: None,
        beta: None,
    };
    let data = assemble(&truth, params.sigma2_eps, &mut rng)?;
    Ok((data, truth))
}

/// `(1/m) sum_i (1/n_i) sum_j (est_ij - truth_ij)^2`.
pub fn ase_trajectory(estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if estimates.is_empty()
        || estimates.len() != truth.len()
        || estimates.iter().zip(truth).any(|(e, t)| e.len() != t.len() || e.is_empty())
    {
        return Err(invalid("trajectory estimates and truth differ in shape"));
    }
    let total: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / e.len() as f64
        })
        .sum();
    Ok(total / estimates.len() as f64)
}

/// `(1/m) sum_i (log est_i - log truth_i)^2`, both given as volatilities.
pub fn ase_logvol(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.is_empty() || estimates.len() != truth.len() {
        return Err(invalid("volatility estimates and truth differ in length"));
    }
    if estimates.iter().chain(truth).any(|v| !(*v > 0.0)) {
        return Err(invalid("volatilities must be positive"));
    }
    Ok(estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e.ln() - t.ln()).powi(2))
        .sum::<f64>()
        / estimates.len() as f64)
}

/// `(est_l - truth_l)^2` per coefficient.
pub fn se_beta(estimates: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() {
        return Err(invalid("coefficient estimates and truth differ in length"));
    }
    Ok(estimates.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).collect())
}

/// `(1/n) sum_{j<n} (U_{j+1} - U_j)^2 / (t_{j+1} - t_j)`.
pub fn empirical_volatility(values: &[f64], times: &[f64]) -> Result<f64> {
    if values.len() != times.len() || values.len() < 2 {
        return Err(invalid("empirical volatility needs at least 2 aligned points"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("times must be strictly increasing"));
    }
    let n = values.len() as f64;
    Ok(values
        .windows(2)
        .zip(times.windows(2))
        .map(|(u, t)| (u[1] - u[0]).powi(2) / (t[1] - t[0]))
        .sum::<f64>()
        / n)
}

/// Least-squares regression of log empirical volatilities on covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageFit {
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    /// Two-sided p-values from Student's t with `m' - k` degrees of freedom.
    pub p_values: Vec<f64>,
    /// Empirical volatility of every subject (zero ones included).
    pub volatilities: Vec<f64>,
    /// Subjects dropped because their empirical volatility was zero.
    pub excluded: usize,
}

/// Two-stage estimate: empirical volatility of each fitted deviation curve,
/// then OLS of its logarithm on the rows of `x`.
pub fn two_stage_beta(u_hat: &[Vec<f64>], times: &[Vec<f64>], x: &DMatrix<f64>) -> Result<TwoStageFit> {
    if u_hat.len() != times.len() || u_hat.len() != x.nrows() {
        return Err(invalid("two-stage inputs differ in subject count"));
    }
    let volatilities = u_hat
        .iter()
        .zip(times)
        .map(|(u, t)| empirical_volatility(u, t))
        .collect::<Result<Vec<_>>>()?;
    let keep: Vec<usize> = (0..volatilities.len()).filter(|&i| volatilities[i] > 0.0).collect();
    let excluded = volatilities.len() - keep.len();
    let (m, k) = (keep.len(), x.ncols());
    if m <= k {
        return Err(invalid(format!(
            "two-stage regression needs more usable subjects than covariates ({m} <= {k})"
        )));
    }
    let xs = DMatrix::from_fn(m, k, |r, c| x[(keep[r], c)]);
    let z = DVector::from_iterator(m, keep.iter().map(|&i| volatilities[i].ln()));
    let xtx = xs.transpose() * &xs;
    let chol = xtx
        .clone()
        .cholesky()
        .filter(|c| {
            c.l_dirty().diagonal().min() > 1e-10 * xtx.diagonal().max().sqrt()
        })
        .ok_or_else(|| invalid("covariate matrix is not of full column rank"))?;
    let beta = chol.solve(&(xs.transpose() * &z));
    let resid = &z - &xs * &beta;
    let dof = (m - k) as f64;
    let s2 = resid.norm_squared() / dof;
    let cov_diag = chol.inverse().diagonal();
    let t_dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| invalid(e.to_string()))?;
    let mut std_errors = Vec::with_capacity(k);
    let mut t_values = Vec::with_capacity(k);
    let mut p_values = Vec::with_capacity(k);
    for l in 0..k {
        let se = (s2 * cov_diag[l]).sqrt();
        let t = beta[l] / se;
        std_errors.push(se);
        t_values.push(t);
        p_values.push(if t.is_finite() { 2.0 * t_dist.sf(t.abs()) } else { 0.0 });
    }
    Ok(TwoStageFit {
        beta: beta.iter().copied().collect(),
        std_errors,
        t_values,
        p_values,
        volatilities,
        excluded,
    })
}

/// Per-subject cubic smoothing splines and the deviations they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct NcsBaseline {
    /// Fitted values at each subject's times.
    pub fitted: Vec<Vec<f64>>,
    /// Fitted curve minus the average fitted curve of the subject's group,
    /// evaluated at the subject's times.
    pub u_hat: Vec<Vec<f64>>,
    /// GCV-selected smoothing parameter (`NaN` for line fits).
    pub lambdas: Vec<f64>,
}

enum SeriesFit {
    Spline(crate::spline::NcsFit),
    Line(f64, f64),
}

impl SeriesFit {
    fn eval(&self, t: f64) -> f64 {
        match self {
            SeriesFit::Spline(f) => f.eval(t),
            SeriesFit::Line(a, b) => a + b * t,
        }
    }
}

fn line_fit(times: &[f64], values: &[f64]) -> (f64, f64) {
    let n = times.len() as f64;
    let tm = times.iter().sum::<f64>() / n;
    let ym = values.iter().sum::<f64>() / n;
    let sxy: f64 = times.iter().zip(values).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = times.iter().map(|t| (t - tm) * (t - tm)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (ym - b * tm, b)
}

/// Fits each subject on its own with a GCV-tuned cubic smoothing spline.
/// Subjects with fewer than four points get the least-squares line, the
/// infinite-penalty limit of the spline.
pub fn ncs_baseline(data: &Dataset) -> Result<NcsBaseline> {
    let fits = data
        .subjects()
        .iter()
        .map(|s| {
            if s.n_obs() >= 4 {
                Ok(SeriesFit::Spline(ncs_fit(&s.times, &s.values, None)?))
            } else {
                let (a, b) = line_fit(&s.times, &s.values);
                Ok(SeriesFit::Line(a, b))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fitted = Vec::with_capacity(fits.len());
    let mut u_hat = Vec::with_capacity(fits.len());
    for (i, s) in data.subjects().iter().enumerate() {
        let members = data.group_members(s.group);
        let own: Vec<f64> = s.times.iter().map(|&t| fits[i].eval(t)).collect();
        let dev = s
            .times
            .iter()
            .zip(&own)
            .map(|(&t, f)| {
                let avg = members.iter().map(|&l| fits[l].eval(t)).sum::<f64>() / members.len() as f64;
                f - avg
            })
            .collect();
        fitted.push(own);
        u_hat.push(dev);
    }
    let lambdas = fits
        .iter()
        .map(|f| match f {
            SeriesFit::Spline(n) => n.lambda,
            SeriesFit::Line(..) => f64::NAN,
        })
        .collect();
    Ok(NcsBaseline {
        fitted,
        u_hat,
        lambdas,
    })
}
