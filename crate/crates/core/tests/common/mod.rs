#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use svr_core::gp_kernels::{
    direct_gp_posterior, GpObservation, GpPosterior, LatentProcess, LinearFunctional, PointEval,
};
use svr_core::sampler::VolatilityTarget;
use svr_core::smoother::ObservationRow;
use svr_core::{Dataset, LinearGaussianSsm, Subject};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let f = &f as &dyn Fn(f64) -> f64;
    // Split first so that low-degree polynomials cannot fool the error test.
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let lo = a + k as f64 * h;
            let hi = lo + h;
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = simpson(lo, hi, fa, fm, fb);
            adaptive(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// `exp(C s)` for the nilpotent shift `C` (ones on the superdiagonal), by
/// truncated power series with explicit matrix products.
pub fn shift_exponential(r: usize, s: f64) -> DMatrix<f64> {
    let c = DMatrix::from_fn(r, r, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
    let mut out = DMatrix::identity(r, r);
    let mut term = DMatrix::identity(r, r);
    for k in 1..=r + 5 {
        term = &term * &c * (s / k as f64);
        out += &term;
    }
    out
}

/// `Var(X(t))` for an order-`r` integrated Wiener state after time `delta`
/// started from a fixed point, by quadrature of `e^{Cu} D D' e^{C'u}`.
pub fn noise_by_quadrature(r: usize, delta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, r, |a, b| {
        integrate(
            |u| {
                let e = shift_exponential(r, delta - u);
                e[(a, r - 1)] * e[(b, r - 1)]
            },
            0.0,
            delta,
            1e-14,
        )
    })
}

/// Sample mean and its standard error, assuming independent values.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and batch-means standard error for an autocorrelated sequence.
pub fn batch_mean_se(values: &[f64], batches: usize) -> (f64, f64) {
    let size = values.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| values[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    mean_se(&means)
}

/// Sample covariance of `(x, y)` with the standard error of the covariance
/// estimate, from the empirical variance of `(x - mx)(y - my)`.
pub fn cov_se(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let (c, se) = mean_se(&prods);
    (c * n / (n - 1.0), se)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn subject(id: &str, group: usize, times: &[f64], values: &[f64], x: &[f64]) -> Subject {
    Subject {
        id: id.to_string(),
        group,
        times: times.to_vec(),
        values: values.to_vec(),
        covariates: x.to_vec(),
    }
}

/// Random dataset with the given per-subject time sets; values are noise
/// around a smooth curve, covariates `(1, x1)`.
pub fn random_dataset(
    rng: &mut impl Rng,
    groups: &[usize],
    times: &[Vec<f64>],
    n_groups: usize,
) -> Dataset {
    let subjects = groups
        .iter()
        .zip(times)
        .enumerate()
        .map(|(i, (&g, ts))| {
            let values: Vec<f64> = ts
                .iter()
                .map(|t| (t * (1.0 + g as f64)).sin() + 0.5 * normal(rng))
                .collect();
            let x1: f64 = normal(rng);
            subject(&format!("s{i}"), g, ts, &values, &[1.0, x1])
        })
        .collect();
    Dataset::new(subjects, n_groups).expect("valid toy dataset")
}

/// Strictly increasing random times in `(0, span]`.
pub fn random_times(rng: &mut impl Rng, n: usize, span: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..span)).collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    t
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// A random single-process instance and the matching dense oracle.
pub struct Instance {
    pub ssm: LinearGaussianSsm,
    pub process: LatentProcess,
    pub observations: Vec<GpObservation>,
}

pub fn random_instance(rng: &mut impl Rng, r: usize, n_obs_epochs: usize) -> Instance {
    let mut times = vec![0.0];
    times.extend(random_times(rng, n_obs_epochs, 5.0));
    let process = LatentProcess {
        order: r,
        initial_var: rng.random_range(0.5..3.0),
        diffusion_var: rng.random_range(0.2..3.0),
    };
    let mut ssm = LinearGaussianSsm::integrated_wiener(
        times.clone(),
        r,
        process.diffusion_var,
        process.initial_var,
    )
    .unwrap();
    let mut observations = Vec::new();
    for (j, &t) in times.iter().enumerate().skip(1) {
        let rows = rng.random_range(0..3);
        for k in 0..rows {
            let loading = if k == 0 {
                let mut l = DVector::zeros(r);
                l[0] = 1.0;
                l
            } else {
                DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0))
            };
            let variance = rng.random_range(0.1..1.0);
            let value = 2.0 * normal(rng);
            let functional = LinearFunctional(
                loading
                    .iter()
                    .enumerate()
                    .map(|(c, &w)| (w, PointEval { process: 0, coord: c, time: t }))
                    .collect(),
            );
            observations.push(GpObservation { functional, value, noise_var: variance });
            ssm.observe(j, ObservationRow { loading, value, variance }).unwrap();
        }
    }
    Instance { ssm, process, observations }
}

pub fn state_targets(times: &[f64], r: usize) -> Vec<LinearFunctional> {
    times
        .iter()
        .flat_map(|&t| (0..r).map(move |c| LinearFunctional::point(0, c, t)))
        .collect()
}

pub fn oracle(inst: &Instance) -> GpPosterior {
    let r = inst.ssm.state_dim();
    direct_gp_posterior(
        &[inst.process],
        &inst.observations,
        &state_targets(inst.ssm.times(), r),
    )
    .unwrap()
}

/// Cumulative distribution of the MH target on a fine log-scale grid.
pub fn grid_cdf(t: &VolatilityTarget) -> (Vec<f64>, Vec<f64>) {
    let n = 40_001;
    let (lo, hi) = (-15.0f64, 8.0f64);
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|j| (lo + h * j as f64).exp()).collect();
    let log_dens: Vec<f64> = xs.iter().map(|&x| t.ln_target(x) + x.ln()).collect();
    let top = log_dens.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = log_dens.iter().map(|v| (v - top).exp()).collect();
    let mut cdf = vec![0.0; n];
    for j in 1..n {
        cdf[j] = cdf[j - 1] + 0.5 * h * (dens[j] + dens[j - 1]);
    }
    let total = cdf[n - 1];
    cdf.iter_mut().for_each(|c| *c /= total);
    (xs, cdf)
}

pub fn ks_distance(draws: &mut [f64], xs: &[f64], cdf: &[f64]) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    xs.iter()
        .zip(cdf)
        .map(|(&x, &c)| {
            let below = draws.partition_point(|v| *v <= x) as f64 / n;
            (below - c).abs()
        })
        .fold(0.0, f64::max)
}
