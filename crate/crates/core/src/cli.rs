//! Command-line front end: `simulate`, `fit`, `evaluate`, `summarize`.
//!
//! Settings come from built-in defaults, then an optional flat `key = value`
//! file (`--config`), then flags; later sources win. Every command writes
//! into a temporary sibling of `--out` and renames it into place only after
//! all files are complete.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::data::{ingest, write_dataset, Dataset};
use crate::error::{invalid, Result, SvrError};
use crate::sampler::{
    hpd_interval, summarize, summarize_columns, ModelConfig, ParameterSummary, PosteriorDraws,
    Sampler, HPD_MASS,
};
use crate::simulate::{
    ase_logvol, ase_trajectory, gen_case1, gen_case2, ncs_baseline, se_beta, two_stage_beta,
    SimCase, SimTruth,
};

#[derive(Debug, Parser)]
#[command(name = "svr", version, about = "Stochastic volatility regression for functional data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic replicate datasets with their ground truth.
    Simulate(Flags),
    /// Run the sampler (and baselines) on one dataset or a directory of replicates.
    Fit(Flags),
    /// Score fits against simulation truth.
    Evaluate(Flags),
    /// Recompute the summary table from a draws file.
    Summarize(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Ncs,
    TwoStage,
    None,
}

impl Baseline {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "ncs" => Ok(Baseline::Ncs),
            "two-stage" => Ok(Baseline::TwoStage),
            "none" => Ok(Baseline::None),
            other => Err(invalid(format!("unknown baseline '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Simulation case (1 or 2).
    #[arg(long)]
    pub case: Option<u32>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Directory holding observations.csv and covariates.csv, or rep_* subdirectories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub observations: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Simulation output directory (evaluate).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Fit output directory (evaluate).
    #[arg(long)]
    pub fits: Option<PathBuf>,
    /// draws.csv to summarize.
    #[arg(long)]
    pub draws: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
}

/// Fully resolved settings of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub case: SimCase,
    pub replicates: usize,
    pub subjects: usize,
    pub jobs: Option<usize>,
    pub baseline: Baseline,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub fits: Option<PathBuf>,
    pub draws: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            case: SimCase::One,
            replicates: 1,
            subjects: 100,
            jobs: None,
            baseline: Baseline::TwoStage,
            out: None,
            data: None,
            observations: None,
            covariates: None,
            truth: None,
            fits: None,
            draws: None,
        }
    }
}

fn parse_case(n: u32) -> Result<SimCase> {
    match n {
        1 => Ok(SimCase::One),
        2 => Ok(SimCase::Two),
        _ => Err(invalid(format!("case must be 1 or 2, got {n}"))),
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("config key '{key}': cannot parse '{value}'")))
}

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("config line {}: expected key = value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(invalid(format!("config line {}: duplicate key '{}'", n + 1, k.trim())));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Applies config-file entries; relative paths resolve against `base`.
    pub fn apply_entries(&mut self, entries: &BTreeMap<String, String>, base: &Path) -> Result<()> {
        let path = |v: &str| Some(base.join(v));
        for (k, v) in entries {
            let v = v.as_str();
            match k.as_str() {
                "seed" => self.model.seed = parse_value(k, v)?,
                "iters" => self.model.n_iter = parse_value(k, v)?,
                "burnin" => self.model.burn_in = parse_value(k, v)?,
                "thin" => self.model.thin = parse_value(k, v)?,
                "p" => self.model.p = parse_value(k, v)?,
                "q" => self.model.q = parse_value(k, v)?,
                "a" => self.model.a = parse_value(k, v)?,
                "b" => self.model.b = parse_value(k, v)?,
                "sigma2_m0" => self.model.sigma2_m0 = parse_value(k, v)?,
                "jobs" => self.jobs = Some(parse_value(k, v)?),
                "baseline" => self.baseline = Baseline::parse(v)?,
                "case" => self.case = parse_case(parse_value(k, v)?)?,
                "replicates" => self.replicates = parse_value(k, v)?,
                "subjects" => self.subjects = parse_value(k, v)?,
                "out" => self.out = path(v),
                "data" => self.data = path(v),
                "observations" => self.observations = path(v),
                "covariates" => self.covariates = path(v),
                "truth" => self.truth = path(v),
                "fits" => self.fits = path(v),
                "draws" => self.draws = path(v),
                other => return Err(invalid(format!("unknown config key '{other}'"))),
            }
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, f: &Flags) -> Result<()> {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(f.seed, self.model.seed);
        set!(f.iters, self.model.n_iter);
        set!(f.burnin, self.model.burn_in);
        set!(f.thin, self.model.thin);
        set!(f.p, self.model.p);
        set!(f.q, self.model.q);
        set!(f.baseline, self.baseline);
        set!(f.replicates, self.replicates);
        set!(f.subjects, self.subjects);
        if let Some(c) = f.case {
            self.case = parse_case(c)?;
        }
        if f.jobs.is_some() {
            self.jobs = f.jobs;
        }
        for (src, dst) in [
            (&f.out, &mut self.out),
            (&f.data, &mut self.data),
            (&f.observations, &mut self.observations),
            (&f.covariates, &mut self.covariates),
            (&f.truth, &mut self.truth),
            (&f.fits, &mut self.fits),
            (&f.draws, &mut self.draws),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        Ok(())
    }

    /// Defaults, then the config file named in `flags`, then the flags.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.apply_entries(&parse_config_text(&text)?, base)?;
        }
        cfg.apply_flags(flags)?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| invalid("--out is required"))
    }

    fn check_exists(path: &Option<PathBuf>, what: &str) -> Result<()> {
        match path {
            Some(p) if !p.exists() => Err(invalid(format!("{what} {} does not exist", p.display()))),
            _ => Ok(()),
        }
    }

    /// Referenced inputs must exist.
    pub fn validate_paths(&self) -> Result<()> {
        Self::check_exists(&self.data, "data directory")?;
        Self::check_exists(&self.observations, "observations file")?;
        Self::check_exists(&self.covariates, "covariates file")?;
        Self::check_exists(&self.truth, "truth directory")?;
        Self::check_exists(&self.fits, "fits directory")?;
        Self::check_exists(&self.draws, "draws file")?;
        Ok(())
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(invalid("jobs must be at least 1"));
            }
            b = b.num_threads(j);
        }
        b.build().map_err(|e| invalid(format!("thread pool: {e}")))
    }
}

/// Writes into a fresh temporary directory next to `out`, then moves it to
/// `out`, replacing any previous contents.
pub fn write_atomically(out: &Path, body: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile::Builder::new().prefix(".svr-tmp-").tempdir_in(&parent)?;
    body(tmp.path())?;
    let staged = tmp.keep();
    if out.exists() {
        let old = tempfile::Builder::new().prefix(".svr-old-").tempdir_in(&parent)?;
        let old_path = old.path().join("previous");
        fs::rename(out, &old_path)?;
        fs::rename(&staged, out)?;
        drop(old);
    } else {
        fs::rename(&staged, out)?;
    }
    Ok(())
}

fn replicate_name(r: usize) -> String {
    format!("rep_{r:03}")
}

/// `rep_*` subdirectories of `dir`, sorted; `dir` itself if it has none.
fn replicate_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut reps: Vec<(String, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.starts_with("rep_").then(|| (name, e.path()))
        })
        .collect();
    reps.sort();
    if reps.is_empty() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "rep".into());
        reps.push((name, dir.to_path_buf()));
    }
    Ok(reps)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// `truth_trajectories.csv`, `truth_subjects.csv`, `truth_beta.csv`.
pub fn write_truth(data: &Dataset, truth: &SimTruth, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("truth_trajectories.csv"))?;
    w.write_record(["subject_id", "time", "m", "u", "signal"])?;
    for (i, s) in data.subjects().iter().enumerate() {
        let m = truth.mean_at_obs(i);
        let u = truth.deviation_at_obs(i);
        for j in 0..s.n_obs() {
            w.write_record([
                s.id.clone(),
                s.times[j].to_string(),
                m[j].to_string(),
                u[j].to_string(),
                (m[j] + u[j]).to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("truth_subjects.csv"))?;
    w.write_record(["subject_id", "group", "sigma2_u"])?;
    for (i, s) in data.subjects().iter().enumerate() {
        let vol = truth.sigma2_u.as_ref().map_or(String::new(), |v| v[i].to_string());
        w.write_record([s.id.clone(), s.group.to_string(), vol])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("truth_beta.csv"))?;
    w.write_record(["parameter", "value"])?;
    if let Some(beta) = &truth.beta {
        for (l, b) in beta.iter().enumerate() {
            w.write_record([format!("beta[{l}]"), b.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    cfg.validate_paths()?;
    let out = cfg.out_dir()?;
    if cfg.replicates == 0 {
        return Err(invalid("replicates must be at least 1"));
    }
    let pool = cfg.thread_pool()?;
    write_atomically(out, |tmp| {
        pool.install(|| {
            (1..=cfg.replicates).into_par_iter().try_for_each(|r| {
                let seed = cfg.model.seed.wrapping_add(r as u64 - 1);
                let (data, truth) = match cfg.case {
                    SimCase::One => gen_case1(seed, cfg.subjects)?,
                    SimCase::Two => gen_case2(seed, cfg.subjects)?,
                };
                let dir = tmp.join(replicate_name(r));
                fs::create_dir_all(&dir)?;
                write_dataset(&data, &dir)?;
                write_truth(&data, &truth, &dir)
            })
        })
    })
}

fn load_dataset(obs: &Path, cov: &Path) -> Result<Dataset> {
    ingest(obs, cov)
}

fn write_draws(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let cols = draws.scalar_columns();
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = std::iter::once("iteration")
        .chain(cols.iter().map(|(n, _)| n.as_str()))
        .collect();
    w.write_record(&header)?;
    for (r, it) in draws.iterations.iter().enumerate() {
        let rec: Vec<String> = std::iter::once(it.to_string())
            .chain(cols.iter().map(|(_, v)| v[r].to_string()))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(rows: &[ParameterSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "mean", "mode", "sd", "hpd_lo", "hpd_hi"])?;
    for s in rows {
        w.write_record([
            s.name.clone(),
            s.mean.to_string(),
            s.mode.to_string(),
            s.sd.to_string(),
            s.hpd_lo.to_string(),
            s.hpd_hi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_trajectories(data: &Dataset, draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "time", "y", "m_hat", "u_hat", "lo", "hi"])?;
    for (i, s) in data.subjects().iter().enumerate() {
        let m = draws.mean_group_curve(i);
        let u = draws.mean_deviation(i);
        let traj = draws.trajectory_draws(i);
        for j in 0..s.n_obs() {
            let column: Vec<f64> = traj.iter().map(|d| d[j]).collect();
            let (lo, hi) = hpd_interval(&column, HPD_MASS)?;
            w.write_record([
                s.id.clone(),
                s.times[j].to_string(),
                s.values[j].to_string(),
                m[j].to_string(),
                u[j].to_string(),
                lo.to_string(),
                hi.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_baselines(data: &Dataset, baseline: Baseline, dir: &Path) -> Result<()> {
    if baseline == Baseline::None {
        return Ok(());
    }
    let ncs = ncs_baseline(data)?;
    let mut w = csv::Writer::from_path(dir.join("ncs_trajectories.csv"))?;
    w.write_record(["subject_id", "time", "y", "fitted", "u_hat"])?;
    for (i, s) in data.subjects().iter().enumerate() {
        for j in 0..s.n_obs() {
            w.write_record([
                s.id.clone(),
                s.times[j].to_string(),
                s.values[j].to_string(),
                ncs.fitted[i][j].to_string(),
                ncs.u_hat[i][j].to_string(),
            ])?;
        }
    }
    w.flush()?;
    if baseline == Baseline::Ncs {
        return Ok(());
    }
    let times: Vec<Vec<f64>> = data.subjects().iter().map(|s| s.times.clone()).collect();
    let fit = match two_stage_beta(&ncs.u_hat, &times, &data.design_matrix()) {
        Ok(f) => f,
        // Too few subjects with nonzero empirical volatility; the SVR
        // outputs do not depend on the baseline.
        Err(SvrError::InvalidArgument(msg)) => {
            eprintln!("svr: warning: two-stage baseline skipped: {msg}");
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    let mut w = csv::Writer::from_path(dir.join("two_stage.csv"))?;
    w.write_record(["parameter", "estimate", "std_error", "t_value", "p_value"])?;
    for l in 0..fit.beta.len() {
        w.write_record([
            format!("beta[{l}]"),
            fit.beta[l].to_string(),
            fit.std_errors[l].to_string(),
            fit.t_values[l].to_string(),
            fit.p_values[l].to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("two_stage_volatility.csv"))?;
    w.write_record(["subject_id", "empirical_volatility"])?;
    for (s, v) in data.subjects().iter().zip(&fit.volatilities) {
        w.write_record([s.id.clone(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the sampler and baselines on one dataset, writing every output file
/// into `dir`.
pub fn fit_dataset(data: &Dataset, cfg: &RunConfig, dir: &Path) -> Result<PosteriorDraws> {
    data.check_fit_ready()?;
    let draws = Sampler::new(cfg.model.clone(), data)?.run()?;
    write_draws(&draws, &dir.join("draws.csv"))?;
    let rows = if draws.len() >= crate::sampler::MIN_SUMMARY_DRAWS {
        summarize(&draws)?
    } else {
        // Short runs still get a table; it is only as good as the draws.
        summarize_columns(&draws.scalar_columns())?
    };
    write_summary(&rows, &dir.join("summary.csv"))?;
    write_trajectories(data, &draws, &dir.join("trajectories.csv"))?;
    write_baselines(data, cfg.baseline, dir)?;
    Ok(draws)
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    cfg.validate_paths()?;
    cfg.model.validate()?;
    let out = cfg.out_dir()?;
    let pool = cfg.thread_pool()?;
    let jobs: Vec<(Option<String>, PathBuf, PathBuf)> = match (&cfg.observations, &cfg.covariates, &cfg.data) {
        (Some(o), Some(c), _) => vec![(None, o.clone(), c.clone())],
        (None, None, Some(d)) => {
            if d.join("observations.csv").exists() {
                vec![(None, d.join("observations.csv"), d.join("covariates.csv"))]
            } else {
                replicate_dirs(d)?
                    .into_iter()
                    .map(|(n, p)| (Some(n), p.join("observations.csv"), p.join("covariates.csv")))
                    .collect()
            }
        }
        _ => {
            return Err(invalid(
                "fit needs --data DIR or both --observations and --covariates",
            ))
        }
    };
    write_atomically(out, |tmp| {
        pool.install(|| {
            jobs.par_iter().try_for_each(|(name, obs, cov)| {
                let data = load_dataset(obs, cov)?;
                let dir = match name {
                    Some(n) => tmp.join(n),
                    None => tmp.to_path_buf(),
                };
                fs::create_dir_all(&dir)?;
                fit_dataset(&data, cfg, &dir).map(|_| ())
            })
        })
    })
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| invalid(format!("{}: missing column '{name}'", path.display())))
}

fn num(s: &str, path: &Path, row: usize) -> Result<f64> {
    s.parse().map_err(|_| SvrError::Data {
        file: path.display().to_string(),
        row,
        message: format!("non-numeric field '{s}'"),
    })
}

/// Per-observation values keyed by `(subject_id, time string)`, grouped by
/// subject in the order of `data`.
fn read_per_obs(data: &Dataset, path: &Path, cols: &[&str]) -> Result<Vec<Vec<Vec<f64>>>> {
    let (header, rows) = read_table(path)?;
    let id_c = column(&header, "subject_id", path)?;
    let t_c = column(&header, "time", path)?;
    let idx: Vec<usize> = cols.iter().map(|c| column(&header, c, path)).collect::<Result<_>>()?;
    let mut map: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for (r, row) in rows.iter().enumerate() {
        let t = num(&row[t_c], path, r + 2)?;
        let vals = idx.iter().map(|&c| num(&row[c], path, r + 2)).collect::<Result<_>>()?;
        map.insert((row[id_c].clone(), t.to_bits()), vals);
    }
    data.subjects()
        .iter()
        .map(|s| {
            s.times
                .iter()
                .map(|t| {
                    map.get(&(s.id.clone(), t.to_bits())).cloned().ok_or_else(|| {
                        invalid(format!("{}: no row for subject {} at time {t}", path.display(), s.id))
                    })
                })
                .collect()
        })
        .collect()
}

fn read_keyed(path: &Path, key: &str, value: &str) -> Result<BTreeMap<String, String>> {
    let (header, rows) = read_table(path)?;
    let k = column(&header, key, path)?;
    let v = column(&header, value, path)?;
    Ok(rows.into_iter().map(|r| (r[k].clone(), r[v].clone())).collect())
}

/// Metrics of one method on one replicate; `None` where not applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodMetrics {
    pub ase_trajectory: f64,
    pub ase_log_volatility: Option<f64>,
    pub se_beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateMetrics {
    pub replicate: String,
    pub svr: MethodMetrics,
    pub ncs: Option<MethodMetrics>,
}

struct TruthFiles {
    data: Dataset,
    signal: Vec<Vec<f64>>,
    sigma2_u: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
}

fn read_truth(dir: &Path) -> Result<TruthFiles> {
    let data = ingest(&dir.join("observations.csv"), &dir.join("covariates.csv"))?;
    let signal = read_per_obs(&data, &dir.join("truth_trajectories.csv"), &["signal"])?
        .into_iter()
        .map(|s| s.into_iter().map(|v| v[0]).collect())
        .collect();
    let subj_path = dir.join("truth_subjects.csv");
    let vols = read_keyed(&subj_path, "subject_id", "sigma2_u")?;
    let sigma2_u = data
        .subjects()
        .iter()
        .map(|s| match vols.get(&s.id).map(String::as_str) {
            Some("") | None => Ok(None),
            Some(v) => num(v, &subj_path, 0).map(Some),
        })
        .collect::<Result<Option<Vec<f64>>>>()?;
    let beta_path = dir.join("truth_beta.csv");
    let (_, rows) = read_table(&beta_path)?;
    let beta = if rows.is_empty() {
        None
    } else {
        Some(rows.iter().enumerate().map(|(r, row)| num(&row[1], &beta_path, r + 2)).collect::<Result<_>>()?)
    };
    Ok(TruthFiles {
        data,
        signal,
        sigma2_u,
        beta,
    })
}

fn summary_means(path: &Path) -> Result<BTreeMap<String, f64>> {
    read_keyed(path, "parameter", "mean")?
        .into_iter()
        .map(|(k, v)| Ok((k, num(&v, path, 0)?)))
        .collect()
}

/// Scores one fit directory against one truth directory.
pub fn evaluate_replicate(name: &str, truth_dir: &Path, fit_dir: &Path) -> Result<ReplicateMetrics> {
    let t = read_truth(truth_dir)?;
    let m = t.data.n_subjects();
    let traj = read_per_obs(&t.data, &fit_dir.join("trajectories.csv"), &["m_hat", "u_hat"])?;
    let svr_traj: Vec<Vec<f64>> = traj
        .iter()
        .map(|s| s.iter().map(|v| v[0] + v[1]).collect())
        .collect();
    let means = summary_means(&fit_dir.join("summary.csv"))?;
    let lookup = |name: String| {
        means
            .get(&name)
            .copied()
            .ok_or_else(|| invalid(format!("summary.csv lacks {name}")))
    };
    let svr_vol = (1..=m).map(|i| lookup(format!("sigma2_u[{i}]"))).collect::<Result<Vec<_>>>()?;
    let k = t.data.n_covariates();
    let svr_beta = (0..k).map(|l| lookup(format!("beta[{l}]"))).collect::<Result<Vec<_>>>()?;
    let svr = MethodMetrics {
        ase_trajectory: ase_trajectory(&svr_traj, &t.signal)?,
        ase_log_volatility: t.sigma2_u.as_ref().map(|v| ase_logvol(&svr_vol, v)).transpose()?,
        se_beta: t.beta.as_ref().map(|b| se_beta(&svr_beta, b)).transpose()?,
    };

    let ncs_path = fit_dir.join("ncs_trajectories.csv");
    let ncs = if ncs_path.exists() {
        let fitted: Vec<Vec<f64>> = read_per_obs(&t.data, &ncs_path, &["fitted"])?
            .into_iter()
            .map(|s| s.into_iter().map(|v| v[0]).collect())
            .collect();
        let vol_path = fit_dir.join("two_stage_volatility.csv");
        let beta_path = fit_dir.join("two_stage.csv");
        let (mut logvol, mut beta) = (None, None);
        if vol_path.exists() && beta_path.exists() {
            let vols = read_keyed(&vol_path, "subject_id", "empirical_volatility")?;
            let est = t
                .data
                .subjects()
                .iter()
                .map(|s| {
                    let v = vols.get(&s.id).ok_or_else(|| invalid(format!("no volatility for {}", s.id)))?;
                    num(v, &vol_path, 0)
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(truth) = &t.sigma2_u {
                // Zero empirical volatilities have no logarithm; score the rest.
                let (e, tr): (Vec<f64>, Vec<f64>) =
                    est.iter().zip(truth).filter(|(e, _)| **e > 0.0).map(|(a, b)| (*a, *b)).unzip();
                logvol = Some(ase_logvol(&e, &tr)?);
            }
            let coefs = read_keyed(&beta_path, "parameter", "estimate")?;
            let b = (0..k)
                .map(|l| {
                    let key = format!("beta[{l}]");
                    let v = coefs.get(&key).ok_or_else(|| invalid(format!("two_stage.csv lacks {key}")))?;
                    num(v, &beta_path, 0)
                })
                .collect::<Result<Vec<_>>>()?;
            beta = t.beta.as_ref().map(|tb| se_beta(&b, tb)).transpose()?;
        }
        Some(MethodMetrics {
            ase_trajectory: ase_trajectory(&fitted, &t.signal)?,
            ase_log_volatility: logvol,
            se_beta: beta,
        })
    } else {
        None
    };
    Ok(ReplicateMetrics {
        replicate: name.to_string(),
        svr,
        ncs,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt)
}

/// `metrics_by_replicate.csv` and the across-replicate means in `table1.csv`.
pub fn write_metrics(metrics: &[ReplicateMetrics], n_coef: usize, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("metrics_by_replicate.csv"))?;
    let mut header = vec![
        "replicate".to_string(),
        "method".into(),
        "ase_trajectory".into(),
        "ase_log_volatility".into(),
    ];
    header.extend((0..n_coef).map(|l| format!("se_beta{l}")));
    w.write_record(&header)?;
    for r in metrics {
        for (method, mm) in [("svr", Some(&r.svr)), ("ncs", r.ncs.as_ref())] {
            let Some(mm) = mm else { continue };
            let mut rec = vec![
                r.replicate.clone(),
                method.to_string(),
                fmt(mm.ase_trajectory),
                opt(mm.ase_log_volatility),
            ];
            rec.extend((0..n_coef).map(|l| opt(mm.se_beta.as_ref().map(|b| b[l]))));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mean = |f: &dyn Fn(&ReplicateMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = metrics.iter().filter_map(f).collect();
        (!vals.is_empty() && vals.len() == metrics.len())
            .then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut w = csv::Writer::from_path(dir.join("table1.csv"))?;
    w.write_record(["metric", "svr", "ncs"])?;
    type Metric = Box<dyn Fn(&MethodMetrics) -> Option<f64>>;
    let rows: Vec<(String, Metric)> = std::iter::once((
        "MASE(M+U)".to_string(),
        Box::new(|m: &MethodMetrics| Some(m.ase_trajectory)) as Metric,
    ))
    .chain(std::iter::once((
        "MASE(log sigma2_U)".to_string(),
        Box::new(|m: &MethodMetrics| m.ase_log_volatility) as Metric,
    )))
    .chain((0..n_coef).map(|l| {
        (
            format!("MSE(beta{l})"),
            Box::new(move |m: &MethodMetrics| m.se_beta.as_ref().map(|b| b[l])) as Metric,
        )
    }))
    .collect();
    for (name, f) in &rows {
        let svr = mean(&|r| f(&r.svr));
        let ncs = mean(&|r| r.ncs.as_ref().and_then(f));
        w.write_record([name.clone(), opt(svr), opt(ncs)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<ReplicateMetrics>> {
    cfg.validate_paths()?;
    let out = cfg.out_dir()?;
    let truth = cfg.truth.as_deref().ok_or_else(|| invalid("evaluate needs --truth"))?;
    let fits = cfg.fits.as_deref().ok_or_else(|| invalid("evaluate needs --fits"))?;
    let truth_reps = replicate_dirs(truth)?;
    let single = truth_reps.len() == 1 && truth_reps[0].1 == truth;
    let pool = cfg.thread_pool()?;
    let metrics: Vec<ReplicateMetrics> = pool.install(|| {
        truth_reps
            .par_iter()
            .map(|(name, tdir)| {
                let fdir = if single { fits.to_path_buf() } else { fits.join(name) };
                evaluate_replicate(name, tdir, &fdir)
            })
            .collect::<Result<_>>()
    })?;
    let n_coef = metrics
        .iter()
        .filter_map(|m| m.svr.se_beta.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    write_atomically(out, |tmp| write_metrics(&metrics, n_coef, tmp))?;
    Ok(metrics)
}

/// Summaries of every column of a draws file (the `iteration` column is
/// skipped).
pub fn summarize_draws_file(path: &Path) -> Result<Vec<ParameterSummary>> {
    let (header, rows) = read_table(path)?;
    let mut cols: Vec<(String, Vec<f64>)> = header
        .iter()
        .filter(|h| h.as_str() != "iteration")
        .map(|h| (h.clone(), Vec::with_capacity(rows.len())))
        .collect();
    let offset = usize::from(header.first().map(String::as_str) == Some("iteration"));
    for (r, row) in rows.iter().enumerate() {
        for (c, col) in cols.iter_mut().enumerate() {
            col.1.push(num(&row[c + offset], path, r + 2)?);
        }
    }
    if rows.len() < crate::sampler::MIN_SUMMARY_DRAWS {
        return Err(invalid(format!(
            "summaries need at least {} draws, got {}",
            crate::sampler::MIN_SUMMARY_DRAWS,
            rows.len()
        )));
    }
    summarize_columns(&cols)
}

pub fn cmd_summarize(cfg: &RunConfig) -> Result<()> {
    cfg.validate_paths()?;
    let out = cfg.out_dir()?;
    let draws = match (&cfg.draws, &cfg.fits) {
        (Some(d), _) => d.clone(),
        (None, Some(f)) => f.join("draws.csv"),
        _ => return Err(invalid("summarize needs --draws FILE or --fits DIR")),
    };
    let rows = summarize_draws_file(&draws)?;
    write_atomically(out, |tmp| write_summary(&rows, &tmp.join("summary.csv")))
}

/// Parses `args` and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(invalid(e.to_string())),
    };
    match &cli.command {
        Command::Simulate(f) => cmd_simulate(&RunConfig::resolve(f)?),
        Command::Fit(f) => cmd_fit(&RunConfig::resolve(f)?),
        Command::Evaluate(f) => cmd_evaluate(&RunConfig::resolve(f)?).map(|_| ()),
        Command::Summarize(f) => cmd_summarize(&RunConfig::resolve(f)?),
    }
}
