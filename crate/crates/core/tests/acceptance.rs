//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the output.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use svr_core::gp_kernels::{HierarchicalGp, HierarchicalVariances, LinearFunctional};
use svr_core::sampler::{hpd_interval, mh_step, AcceptanceStats, InverseGamma, MhOutcome, Updates, HPD_MASS};
use svr_core::simulate::{ase_trajectory, gen_case1, gen_case2, ncs_baseline, SimTruth};
use svr_core::smoother::{kalman_filter, kalman_smooth, simulation_smoother};
use svr_core::spline::{backfit, normal_equation_residual, BackfitOptions, SplineLambdas};
use svr_core::statespace::{process_noise, transition_matrix};
use svr_core::{Dataset, LinearGaussianSsm, ModelConfig, Sampler};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// 1-3: simulation studies

struct RepResult {
    svr_ase: f64,
    ncs_ase: f64,
    beta2_mean: f64,
    beta2_covered: bool,
}

fn fit_replicate(data: &Dataset, truth: &SimTruth, seed: u64) -> RepResult {
    let cfg = ModelConfig {
        n_iter: 3000,
        burn_in: 1000,
        thin: 4,
        seed,
        ..ModelConfig::default()
    };
    let draws = Sampler::new(cfg, data).unwrap().run().unwrap();
    let m = data.n_subjects();
    let svr: Vec<Vec<f64>> = (0..m).map(|i| draws.mean_trajectory(i)).collect();
    let signal = truth.signal();
    let ncs = ncs_baseline(data).unwrap();
    let beta2: Vec<f64> = draws.draws.iter().map(|d| d.beta[2]).collect();
    let (lo, hi) = hpd_interval(&beta2, HPD_MASS).unwrap();
    RepResult {
        svr_ase: ase_trajectory(&svr, &signal).unwrap(),
        ncs_ase: ase_trajectory(&ncs.fitted, &signal).unwrap(),
        beta2_mean: beta2.iter().sum::<f64>() / beta2.len() as f64,
        beta2_covered: lo <= 2.0 && 2.0 <= hi,
    }
}

fn run_case(case: u32) -> Vec<RepResult> {
    (1..=10u64)
        .into_par_iter()
        .map(|seed| {
            let (data, truth) = match case {
                1 => gen_case1(seed, 100).unwrap(),
                _ => gen_case2(seed, 100).unwrap(),
            };
            fit_replicate(&data, &truth, seed)
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn case1_trajectories(reps: &[RepResult]) -> Outcome {
    let mase = mean(reps.iter().map(|r| r.svr_ase));
    let ncs = mean(reps.iter().map(|r| r.ncs_ase));
    let wins = reps.iter().filter(|r| r.svr_ase < r.ncs_ase).count();
    outcome(
        (0.25..=0.55).contains(&mase) && wins >= 8,
        format!("MASE(M+U) SVR {mase:.3} (target [0.25, 0.55]), NCS {ncs:.3}; SVR better on {wins}/10"),
    )
}

fn case1_regression(reps: &[RepResult]) -> Outcome {
    let covered = reps.iter().filter(|r| r.beta2_covered).count();
    let se = mean(reps.iter().map(|r| (r.beta2_mean - 2.0).powi(2)));
    outcome(
        covered >= 8 && se <= 0.3,
        format!("beta2 HPD covers 2 on {covered}/10; mean SE(beta2) {se:.4} (limit 0.3)"),
    )
}

fn case2_noninferiority(reps: &[RepResult]) -> Outcome {
    let svr = mean(reps.iter().map(|r| r.svr_ase));
    let ncs = mean(reps.iter().map(|r| r.ncs_ase));
    outcome(svr <= ncs, format!("MASE(M+U) SVR {svr:.3} vs NCS {ncs:.3}"))
}

// ---------------------------------------------------------------------------
// 4: smoother vs direct GP

fn oracle_equivalence() -> Outcome {
    let mut rng = common::rng(11);
    let (mut worst_moment, mut worst_ll) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let r = 1 + case % 3;
        let n = rng.random_range(1..=10);
        let inst = common::random_instance(&mut rng, r, n);
        let sm = kalman_smooth(&inst.ssm).unwrap();
        let post = common::oracle(&inst);
        for (j, (m, c)) in sm.smoothed_means.iter().zip(&sm.smoothed_covs).enumerate() {
            for a in 0..r {
                worst_moment = worst_moment.max((m[a] - post.mean[j * r + a]).abs());
                for b in 0..r {
                    worst_moment = worst_moment.max((c[(a, b)] - post.cov[(j * r + a, j * r + b)]).abs());
                }
            }
        }
        let f = kalman_filter(&inst.ssm).unwrap();
        worst_ll = worst_ll.max((f.log_likelihood - post.log_marginal).abs());
    }
    outcome(
        worst_moment < 1e-6 && worst_ll < 1e-8,
        format!("50 instances: max moment error {worst_moment:.1e} (< 1e-6), max log-lik error {worst_ll:.1e} (< 1e-8)"),
    )
}

// ---------------------------------------------------------------------------
// 5: exact discretization

fn discretization() -> Outcome {
    let mut worst_w = 0.0f64;
    for r in 1..=4 {
        for delta in [0.1, 0.5, 1.0, 2.0] {
            let w = process_noise(r, delta).unwrap();
            worst_w = worst_w.max(common::max_abs_diff(&w, &common::noise_by_quadrature(r, delta)));
        }
    }
    let mut worst_id = 0.0f64;
    let gaps = [0.0, 0.05, 0.3, 1.0, 1.7, 3.0];
    for r in 1..=4 {
        for &d1 in &gaps {
            for &d2 in &gaps {
                let g1 = transition_matrix(r, d1).unwrap();
                let g2 = transition_matrix(r, d2).unwrap();
                let semigroup = common::max_abs_diff(&transition_matrix(r, d1 + d2).unwrap(), &(&g2 * &g1));
                let ck = common::max_abs_diff(
                    &process_noise(r, d1 + d2).unwrap(),
                    &(&g2 * process_noise(r, d1).unwrap() * g2.transpose() + process_noise(r, d2).unwrap()),
                );
                worst_id = worst_id.max(semigroup).max(ck);
            }
        }
    }
    outcome(
        worst_w < 1e-8 && worst_id < 1e-10,
        format!("W vs quadrature {worst_w:.1e} (< 1e-8); semigroup/Chapman-Kolmogorov {worst_id:.1e} (< 1e-10)"),
    )
}

// ---------------------------------------------------------------------------
// 6: conditional calibration

fn ig_z(ig: &InverseGamma, seed: u64) -> f64 {
    let mut rng = common::rng(seed);
    let draws: Vec<f64> = (0..100_000).map(|_| ig.sample(&mut rng)).collect();
    let (m, se) = common::mean_se(&draws);
    (m - ig.mean()).abs() / se
}

fn calibration() -> Outcome {
    let (data, _) = gen_case1(3, 6).unwrap();
    let cfg = ModelConfig {
        n_iter: 10,
        burn_in: 0,
        thin: 1,
        seed: 3,
        ..ModelConfig::default()
    };
    let s = Sampler::new(cfg, &data).unwrap();
    let mut state = s.initial_state().unwrap();
    let mut stats = AcceptanceStats::new(data.n_subjects());
    for it in 0..20 {
        s.sweep(&mut state, it, &mut stats).unwrap();
    }
    let mut laws = vec![
        ("sigma2_eps", s.sigma_eps_conditional(&state).unwrap()),
        ("sigma2_u0", s.sigma_u0_conditional(&state).unwrap()),
        ("sigma2_u[1] proposal", s.volatility_target(&state, 0).unwrap().proposal),
    ];
    for k in 0..data.n_groups() {
        laws.push(("sigma2_m", s.sigma_m_conditional(&state, k).unwrap()));
    }
    let worst_z = laws
        .iter()
        .enumerate()
        .map(|(c, (_, ig))| ig_z(ig, 100 + c as u64))
        .fold(0.0, f64::max);
    let all_finite_var = laws.iter().all(|(_, ig)| ig.shape > 2.0);

    // Step (3d) chain against the grid-evaluated target.
    let toy = Dataset::new(
        vec![common::subject("a", 1, &[0.5, 1.0, 1.5, 2.5, 3.0], &[0.0; 5], &[1.0, 0.4])],
        1,
    )
    .unwrap();
    let cfg = ModelConfig { n_iter: 10, burn_in: 0, thin: 1, ..ModelConfig::default() };
    let s = Sampler::with_updates(cfg, &toy, Updates::curves_only()).unwrap();
    let mut state = s.initial_state().unwrap();
    state.u_states[0] = [0.0, 0.6, -0.2, 0.9, 1.8, 1.1]
        .iter()
        .map(|&v| nalgebra::DVector::from_element(1, v))
        .collect();
    state.beta = nalgebra::DVector::from_vec(vec![0.1, 0.6]);
    state.sigma2 = 0.8;
    let target = s.volatility_target(&state, 0).unwrap();
    let mut rng = common::rng(77);
    let mut x = 1.0;
    let mut draws = Vec::with_capacity(200_000);
    let mut nonfinite = 0;
    for _ in 0..200_000 {
        let (next, o) = mh_step(&target, x, &mut rng);
        nonfinite += usize::from(o == MhOutcome::NonFinite);
        x = next;
        draws.push(x);
    }
    let (xs, cdf) = common::grid_cdf(&target);
    let ks = common::ks_distance(&mut draws, &xs, &cdf);
    outcome(
        worst_z < 3.0 && all_finite_var && ks < 0.02 && nonfinite == 0,
        format!(
            "{} IG conditionals: max |z| {worst_z:.2} (< 3, 100k draws); MH KS distance {ks:.4} (< 0.02, 200k draws)",
            laws.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7: simulation smoother

fn smoother_moments() -> Outcome {
    let times = vec![0.0, 0.4, 1.1, 1.5, 2.6, 3.3];
    let values = [0.8, -0.3, 1.6, 0.9, 0.2];
    let mut ssm = LinearGaussianSsm::integrated_wiener(times.clone(), 1, 1.5, 2.0).unwrap();
    for (j, &v) in values.iter().enumerate() {
        ssm.observe_level(j + 1, v, 0.5).unwrap();
    }
    // Analytic joint smoothing covariance from the RTS recursions.
    let sm = kalman_smooth(&ssm).unwrap();
    let filt = kalman_filter(&ssm).unwrap();
    let n = times.len();
    let mut cov = DMatrix::zeros(n, n);
    for j in 0..n {
        cov[(j, j)] = sm.smoothed_covs[j][(0, 0)];
        let mut c = sm.smoothed_covs[j][(0, 0)];
        for l in (0..j).rev() {
            // Cov(x_l, x_j) = J_l Cov(x_{l+1}, x_j) with J_l = P_l G' P_{l+1|l}^-1.
            let g = ssm.steps()[l].transition[(0, 0)];
            let gain = filt.filtered_covs[l][(0, 0)] * g / filt.predicted_covs[l + 1][(0, 0)];
            c *= gain;
            cov[(l, j)] = c;
            cov[(j, l)] = c;
        }
    }
    let mut rng = common::rng(101);
    let draws = 20_000;
    let mut samples: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(draws)).collect();
    for _ in 0..draws {
        let path = simulation_smoother(&ssm, &mut rng).unwrap();
        for (j, x) in path.iter().enumerate() {
            samples[j].push(x[0]);
        }
    }
    let mut worst = 0.0f64;
    for j in 0..n {
        let (m, se) = common::mean_se(&samples[j]);
        worst = worst.max((m - sm.smoothed_means[j][0]).abs() / se);
        for l in j..n {
            let (c, se) = common::cov_se(&samples[j], &samples[l]);
            worst = worst.max((c - cov[(j, l)]).abs() / se);
        }
    }
    outcome(
        worst < 3.0,
        format!("n = 5 observations, r = 1, 20k draws: max |z| over means and covariances {worst:.2} (< 3)"),
    )
}

// ---------------------------------------------------------------------------
// 8: spline backfitting

fn toy(rng: &mut impl Rng, groups: &[usize], n_groups: usize, n_obs: usize) -> Dataset {
    let times: Vec<Vec<f64>> = groups
        .iter()
        .map(|_| loop {
            let t = common::random_times(rng, n_obs, 3.0);
            if t.len() == n_obs {
                break t;
            }
        })
        .collect();
    common::random_dataset(rng, groups, &times, n_groups)
}

fn diffuse_gp_mean(data: &Dataset, eps: f64, s2m: &[f64], s2u: &[f64]) -> Vec<f64> {
    let vars = HierarchicalVariances {
        sigma2_m0: 1e8,
        sigma2_m: s2m.to_vec(),
        sigma2_u0: 1e8,
        sigma2_u: s2u.to_vec(),
        sigma2_eps: eps,
    };
    let gp = HierarchicalGp::new(data, 2, 1, &vars).unwrap();
    let mut targets = Vec::new();
    for (i, s) in data.subjects().iter().enumerate() {
        for &t in &s.times {
            targets.push(
                LinearFunctional::point(gp.mean_process(s.group - 1), 0, t)
                    .plus(LinearFunctional::point(gp.deviation_process(i), 0, t)),
            );
        }
    }
    gp.posterior(&targets).unwrap().mean.iter().copied().collect()
}

fn spline_equivalence() -> Outcome {
    let exact = BackfitOptions { tol: 0.0, max_sweeps: 20_000 };
    let mut rng = common::rng(4);
    let mut monotone = true;
    let mut worst_resid = 0.0f64;
    let mut instances = 0;
    for case in 0..30 {
        let (p, q) = [(2, 1), (2, 2), (1, 1)][case % 3];
        let groups: &[usize] = if case % 2 == 0 { &[1, 2, 1, 2] } else { &[1, 1] };
        let data = toy(&mut rng, groups, *groups.iter().max().unwrap(), 3 + case % 3);
        let lam = SplineLambdas {
            m: vec![10f64.powf(rng.random_range(-2.0..0.5)); data.n_groups()],
            u: vec![10f64.powf(rng.random_range(-2.0..0.5)); data.n_subjects()],
        };
        let fit = backfit(&data, p, q, lam.clone(), BackfitOptions::default()).unwrap();
        monotone &= fit.dpss_history.windows(2).all(|w| w[1] <= w[0]);
        let fit = backfit(&data, p, q, lam, exact).unwrap();
        // At the floating-point floor sweeps may move the objective by rounding.
        monotone &= fit.dpss_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-14));
        worst_resid = worst_resid.max(normal_equation_residual(&fit, &data).unwrap());
        instances += 1;
    }

    // Sampler posterior mean of M + U with fixed variances against the
    // backfit curve with the matching smoothing parameters.
    let mut rng = common::rng(8);
    let data = toy(&mut rng, &[1, 2, 3, 4], 4, 4);
    let eps = 0.5;
    let s2m = vec![2.0, 1.0, 3.0, 0.5];
    let s2u = vec![0.4, 1.5, 0.8, 2.0];
    let lam = SplineLambdas::from_variances(&data, eps, &s2m, &s2u).unwrap();
    let fitted: Vec<f64> = backfit(&data, 2, 1, lam, exact).unwrap().fitted(&data).into_iter().flatten().collect();
    let cfg = ModelConfig {
        p: 2,
        q: 1,
        sigma2_m0: 1e8,
        n_iter: 30_000,
        burn_in: 1000,
        thin: 1,
        seed: 8,
        ..ModelConfig::default()
    };
    let s = Sampler::with_updates(cfg, &data, Updates::curves_only()).unwrap();
    let mut state = s.initial_state().unwrap();
    state.sigma2_eps = eps;
    state.sigma2_m = s2m.clone();
    state.sigma2_u = s2u.clone();
    state.sigma2_u0 = 1e8;
    let draws = s.run_from(state).unwrap();
    let mut worst_z = 0.0f64;
    let mut offset = 0;
    for i in 0..data.n_subjects() {
        let traj = draws.trajectory_draws(i);
        for j in 0..data.subjects()[i].n_obs() {
            let column: Vec<f64> = traj.iter().map(|d| d[j]).collect();
            let (m, se) = common::batch_mean_se(&column, 50);
            worst_z = worst_z.max((m - fitted[offset + j]).abs() / se);
        }
        offset += data.subjects()[i].n_obs();
    }
    let gp_gap = diffuse_gp_mean(&data, eps, &s2m, &s2u)
        .iter()
        .zip(&fitted)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    outcome(
        monotone && worst_resid < 1e-8 && worst_z < 3.0 && gp_gap < 1e-5,
        format!(
            "DPSS non-increasing on {instances} instances: {monotone}; normal-equation residual {worst_resid:.1e} (< 1e-8); \
             m=4 toy chain vs backfit max |z| {worst_z:.2} (< 3, 30k sweeps), diffuse GP vs backfit {gp_gap:.1e}"
        ),
    )
}

/// Two subjects per group: the printed group smoothing parameter against the
/// one divided by the group size.
fn lambda_m_note() -> String {
    let mut rng = common::rng(9);
    let data = toy(&mut rng, &[1, 1, 2, 2], 2, 4);
    let eps = 0.5;
    let s2m = vec![2.0, 1.0];
    let s2u = vec![0.4, 1.5, 0.8, 2.0];
    let gp = diffuse_gp_mean(&data, eps, &s2m, &s2u);
    let exact = BackfitOptions { tol: 0.0, max_sweeps: 20_000 };
    let printed = SplineLambdas::from_variances(&data, eps, &s2m, &s2u).unwrap();
    let mut scaled = printed.clone();
    for (k, l) in scaled.m.iter_mut().enumerate() {
        *l /= data.group_members(k + 1).len() as f64;
    }
    let gap = |lam: SplineLambdas| {
        backfit(&data, 2, 1, lam, exact)
            .unwrap()
            .fitted(&data)
            .into_iter()
            .flatten()
            .zip(&gp)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    format!(
        "2 groups x 2 subjects: backfit vs diffuse GP mean {:.1e} with lambda_M as printed, {:.1e} with lambda_M / m_k",
        gap(printed),
        gap(scaled)
    )
}

// ---------------------------------------------------------------------------
// 9: determinism

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run_once = |tag: &str, jobs: &str| {
        let root = tmp.path().join(tag);
        let p = |name: &str| root.join(name).to_str().unwrap().to_string();
        let cli = |args: &[&str]| {
            svr_core::cli::run(std::iter::once("svr").chain(args.iter().copied())).unwrap();
        };
        cli(&["simulate", "--seed", "21", "--replicates", "3", "--subjects", "25", "--jobs", jobs, "--out", &p("sim")]);
        cli(&[
            "fit", "--data", &p("sim"), "--iters", "400", "--burnin", "100", "--thin", "2", "--seed", "5",
            "--jobs", jobs, "--out", &p("fit"),
        ]);
        cli(&["evaluate", "--truth", &p("sim"), "--fits", &p("fit"), "--jobs", jobs, "--out", &p("eval")]);
        cli(&["summarize", "--fits", &p("fit/rep_002"), "--out", &p("summary")]);
        snapshot(&root)
    };
    let a = run_once("a", "1");
    let b = run_once("b", "1");
    let c = run_once("c", "4");
    outcome(
        !a.is_empty() && a == b && a == c,
        format!("{} output files byte-identical across 3 runs (1 and 4 jobs)", a.len()),
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, o: Outcome, started: Instant| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} [{id}] {name}: {} ({:.1}s)", o.detail, started.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    let case1 = catch_unwind(|| run_case(1)).ok();
    let elapsed = t;
    match &case1 {
        Some(reps) => {
            report(1, "Case I trajectories", case1_trajectories(reps), elapsed);
            report(2, "Case I volatility regression", case1_regression(reps), elapsed);
        }
        None => {
            report(1, "Case I trajectories", outcome(false, "run panicked".into()), elapsed);
            report(2, "Case I volatility regression", outcome(false, "run panicked".into()), elapsed);
        }
    }
    let t = Instant::now();
    report(3, "Case II non-inferiority", guarded(|| case2_noninferiority(&run_case(2))), t);
    let t = Instant::now();
    report(4, "smoother vs direct GP", guarded(oracle_equivalence), t);
    let t = Instant::now();
    report(5, "exact discretization", guarded(discretization), t);
    let t = Instant::now();
    report(6, "conditional calibration", guarded(calibration), t);
    let t = Instant::now();
    report(7, "simulation smoother", guarded(smoother_moments), t);
    let t = Instant::now();
    report(8, "spline backfitting", guarded(spline_equivalence), t);
    if let Ok(note) = catch_unwind(lambda_m_note) {
        println!("note: {note}");
    }
    let t = Instant::now();
    report(9, "determinism", guarded(determinism), t);

    println!("{} of 9 criteria failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
