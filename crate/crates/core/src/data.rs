//! Multi-subject longitudinal data and its CSV representation.
//!
//! `observations.csv`: `subject_id,group,time,value` (group is 1-based).
//! `covariates.csv`: `subject_id,x1,x2,...`; the intercept column is added on
//! ingestion.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{invalid, Result, SvrError};

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// 1-based group label.
    pub group: usize,
    /// Strictly increasing, positive.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Covariate vector, leading entry 1.
    pub covariates: Vec<f64>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<Subject>,
    n_groups: usize,
    merged_grid: Vec<f64>,
    /// Position of each subject time within `merged_grid`.
    grid_index: Vec<Vec<usize>>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset and checks its structural invariants: strictly
    /// increasing positive times, matching value counts, group labels in
    /// `1..=n_groups`, equal-length covariate vectors.
    ///
    /// Empty groups and single-observation subjects are allowed here;
    /// [`Dataset::check_fit_ready`] enforces the stricter fitting contract.
    pub fn new(subjects: Vec<Subject>, n_groups: usize) -> Result<Self> {
        if n_groups == 0 {
            return Err(invalid("at least one group is required"));
        }
        let k = subjects.first().map_or(1, |s| s.covariates.len());
        for s in &subjects {
            if s.times.len() != s.values.len() {
                return Err(invalid(format!("subject {}: times/values length mismatch", s.id)));
            }
            if s.times.is_empty() {
                return Err(invalid(format!("subject {} has no observations", s.id)));
            }
            if s.group == 0 || s.group > n_groups {
                return Err(invalid(format!(
                    "subject {}: group {} outside 1..={n_groups}",
                    s.id, s.group
                )));
            }
            if s.times.iter().chain(&s.values).any(|v| !v.is_finite()) {
                return Err(invalid(format!("subject {}: non-finite time or value", s.id)));
            }
            if s.times[0] <= 0.0 {
                return Err(invalid(format!("subject {}: times must be positive", s.id)));
            }
            if s.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid(format!(
                    "subject {}: times must be strictly increasing",
                    s.id
                )));
            }
            if s.covariates.len() != k || k == 0 {
                return Err(invalid(format!(
                    "subject {}: expected {k} covariates, got {}",
                    s.id,
                    s.covariates.len()
                )));
            }
        }
        let mut grid: Vec<f64> = subjects.iter().flat_map(|s| s.times.iter().copied()).collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let grid_index = subjects
            .iter()
            .map(|s| {
                s.times
                    .iter()
                    .map(|t| grid.binary_search_by(|g| g.total_cmp(t)).expect("time in grid"))
                    .collect()
            })
            .collect();
        let covariate_names = std::iter::once("intercept".to_string())
            .chain((1..k).map(|j| format!("x{j}")))
            .collect();
        Ok(Self {
            subjects,
            n_groups,
            merged_grid: grid,
            grid_index,
            covariate_names,
        })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_covariates() {
            return Err(invalid("covariate name count mismatch"));
        }
        self.covariate_names = names;
        Ok(self)
    }

    /// Fitting contract: every subject has at least two observations, every
    /// group is nonempty and covariates start with an intercept.
    pub fn check_fit_ready(&self) -> Result<()> {
        if let Some(s) = self.subjects.iter().find(|s| s.n_obs() < 2) {
            return Err(invalid(format!("subject {} has fewer than 2 observations", s.id)));
        }
        for k in 1..=self.n_groups {
            if !self.subjects.iter().any(|s| s.group == k) {
                return Err(invalid(format!("group {k} has no subjects")));
            }
        }
        if self.subjects.iter().any(|s| s.covariates[0] != 1.0) {
            return Err(invalid("covariate vectors must start with the intercept 1"));
        }
        Ok(())
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_covariates(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.covariates.len())
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(Subject::n_obs).sum()
    }

    /// Sorted union of all observation times.
    pub fn merged_grid(&self) -> &[f64] {
        &self.merged_grid
    }

    /// Indices into [`Dataset::merged_grid`] of subject `i`'s times.
    pub fn grid_index(&self, i: usize) -> &[usize] {
        &self.grid_index[i]
    }

    /// 0-based subject indices belonging to 1-based group `k`.
    pub fn group_members(&self, k: usize) -> Vec<usize> {
        (0..self.subjects.len())
            .filter(|&i| self.subjects[i].group == k)
            .collect()
    }

    /// `m x k` design matrix.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let k = self.n_covariates();
        DMatrix::from_fn(self.subjects.len(), k, |i, j| self.subjects[i].covariates[j])
    }

    /// Right end of the time domain: largest time plus the smallest gap of
    /// the merged grid.
    pub fn domain_end(&self) -> f64 {
        let g = &self.merged_grid;
        let last = *g.last().unwrap_or(&1.0);
        let gap = g
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let gap = if gap.is_finite() { gap } else { g.first().copied().unwrap_or(1.0) };
        last + gap
    }

    /// Copy with each subject's values replaced.
    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != self.subjects.len()
            || values.iter().zip(&self.subjects).any(|(v, s)| v.len() != s.n_obs())
        {
            return Err(invalid("replacement values do not match dataset shape"));
        }
        let mut out = self.clone();
        for (s, v) in out.subjects.iter_mut().zip(values) {
            s.values = v;
        }
        Ok(out)
    }
}

fn data_err(file: &Path, row: usize, message: impl Into<String>) -> SvrError {
    SvrError::Data {
        file: file.display().to_string(),
        row,
        message: message.into(),
    }
}

fn parse_f64(file: &Path, row: usize, field: &str, name: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| data_err(file, row, format!("non-numeric {name} '{field}'")))?;
    if !v.is_finite() {
        return Err(data_err(file, row, format!("non-finite {name} '{field}'")));
    }
    Ok(v)
}

fn expect_header(file: &Path, header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(data_err(
            file,
            1,
            format!("expected header starting with {}", expected.join(",")),
        ));
    }
    Ok(())
}

/// Reads and validates the observation and covariate files.
///
/// Row numbers in errors count the header as row 1.
pub fn ingest(observations: &Path, covariates: &Path) -> Result<Dataset> {
    struct Raw {
        group: usize,
        points: Vec<(f64, f64, usize)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut raw: HashMap<String, Raw> = HashMap::new();

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(observations)?;
    expect_header(observations, rdr.headers()?, &["subject_id", "group", "time", "value"])?;
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 2;
        let rec = rec?;
        if rec.len() != 4 {
            return Err(data_err(observations, row, "expected 4 fields"));
        }
        let id = rec[0].to_string();
        let group: usize = rec[1]
            .parse()
            .map_err(|_| data_err(observations, row, format!("invalid group '{}'", &rec[1])))?;
        if group == 0 {
            return Err(data_err(observations, row, "groups are 1-based"));
        }
        let time = parse_f64(observations, row, &rec[2], "time")?;
        if time <= 0.0 {
            return Err(data_err(observations, row, "times must be positive"));
        }
        let value = parse_f64(observations, row, &rec[3], "value")?;
        let entry = raw.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Raw {
                group,
                points: Vec::new(),
            }
        });
        if entry.group != group {
            return Err(data_err(
                observations,
                row,
                format!("subject {id} changes group ({} vs {group})", entry.group),
            ));
        }
        if let Some(&(_, _, first)) = entry.points.iter().find(|p| p.0 == time) {
            return Err(data_err(
                observations,
                row,
                format!("duplicate time {time} for subject {id} (first seen on row {first})"),
            ));
        }
        entry.points.push((time, value, row));
    }

    let mut covs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(covariates)?;
    let header = rdr.headers()?.clone();
    expect_header(covariates, &header, &["subject_id"])?;
    let names: Vec<String> = std::iter::once("intercept".to_string())
        .chain(header.iter().skip(1).map(str::to_string))
        .collect();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(data_err(covariates, row, format!("expected {} fields", header.len())));
        }
        let id = rec[0].to_string();
        if !raw.contains_key(&id) {
            return Err(data_err(covariates, row, format!("subject {id} has no observations")));
        }
        let mut x = vec![1.0];
        for (j, f) in rec.iter().enumerate().skip(1) {
            x.push(parse_f64(covariates, row, f, &header[j])?);
        }
        if covs.insert(id.clone(), x).is_some() {
            return Err(data_err(covariates, row, format!("duplicate covariates for {id}")));
        }
    }

    let n_groups = raw.values().map(|r| r.group).max().unwrap_or(0);
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut r = raw.remove(&id).expect("subject recorded");
        let covariates = covs
            .remove(&id)
            .ok_or_else(|| invalid(format!("subject {id} is missing covariates")))?;
        r.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        subjects.push(Subject {
            id,
            group: r.group,
            times: r.points.iter().map(|p| p.0).collect(),
            values: r.points.iter().map(|p| p.1).collect(),
            covariates,
        });
    }
    let data = Dataset::new(subjects, n_groups)?.with_covariate_names(names)?;
    data.check_fit_ready()?;
    Ok(data)
}

/// Writes `observations.csv` and `covariates.csv` into `dir`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("observations.csv"))?;
    w.write_record(["subject_id", "group", "time", "value"])?;
    for s in data.subjects() {
        for (t, y) in s.times.iter().zip(&s.values) {
            w.write_record([s.id.clone(), s.group.to_string(), t.to_string(), y.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("covariates.csv"))?;
    let header: Vec<String> = std::iter::once("subject_id".to_string())
        .chain(data.covariate_names().iter().skip(1).cloned())
        .collect();
    w.write_record(&header)?;
    for s in data.subjects() {
        let rec: Vec<String> = std::iter::once(s.id.clone())
            .chain(s.covariates.iter().skip(1).map(f64::to_string))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
