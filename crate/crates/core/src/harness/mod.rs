//! Replication engine: simulates panels, runs every configured estimator
//! cell, scores against Monte Carlo ground truth and writes report tables.

pub mod cli;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, msm_estimates, Estimate, EstimatorConfig, Method, OutcomeLearner};
use crate::sem_sim::{counterfactual_truth, simulate_panel, RegimeSpec, SimSpec};
use crate::seeds;

/// One estimator column of the report: a method and, when it needs one, an
/// outcome learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: Method,
    pub learner: Option<OutcomeLearner>,
}

impl CellSpec {
    pub fn label(&self) -> String {
        match &self.learner {
            Some(l) => format!("{}-{}", self.method, l),
            None => self.method.to_string(),
        }
    }

    /// `method` or `method:learner`.
    pub fn parse(s: &str) -> Result<CellSpec> {
        let (m, l) = match s.split_once(':') {
            Some((m, l)) => (m, Some(l)),
            None => (s, None),
        };
        let method = Method::parse(m)?;
        let learner = match (method.needs_learner(), l) {
            (true, Some(l)) => Some(OutcomeLearner::parse(l)?),
            (true, None) => return Err(Error::Config(format!("{method} needs a learner, e.g. {method}:L1"))),
            (false, Some(_)) => return Err(Error::Config(format!("{method} takes no learner"))),
            (false, None) => None,
        };
        Ok(CellSpec { method, learner })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_subjects: usize,
    /// Horizon of the simulated panels.
    #[serde(rename = "K")]
    pub horizon: usize,
    pub replications: usize,
    /// Estimation horizons `K` to report; time point is `K + 1`.
    pub horizons: Vec<usize>,
    pub cells: Vec<CellSpec>,
    pub regimes: Vec<RegimeSpec>,
    pub seed: u64,
    pub mc_samples: usize,
    pub out_dir: PathBuf,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_subjects: 1000,
            horizon: 11,
            replications: 10,
            horizons: vec![10, 11],
            cells: vec![
                CellSpec::parse("iptw").expect("literal"),
                CellSpec::parse("msm").expect("literal"),
                CellSpec::parse("seq_g:L1").expect("literal"),
                CellSpec::parse("ltmle:L1").expect("literal"),
                CellSpec::parse("ts:L1").expect("literal"),
            ],
            regimes: RegimeSpec::ALL.to_vec(),
            seed: 1,
            mc_samples: 1_000_000,
            out_dir: PathBuf::from("bench_out"),
        }
    }
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl BenchConfig {
    /// Parses `key = value` lines. `#` starts a comment. Keys: `n`, `K`, `R`,
    /// `seed`, `mc_samples`, `methods`, `learners`, `regimes`, `horizons`,
    /// `out_dir`. A method without `:learner` is crossed with `learners`.
    pub fn parse(text: &str) -> Result<BenchConfig> {
        let mut cfg = BenchConfig::default();
        let mut methods: Option<Vec<String>> = None;
        let mut learners: Option<Vec<String>> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: no + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "n" => cfg.n_subjects = parse_num(key, value)?,
                "K" => cfg.horizon = parse_num(key, value)?,
                "R" => cfg.replications = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "mc_samples" => cfg.mc_samples = parse_num(key, value)?,
                "methods" => methods = Some(parse_list(value, |s| Ok(s.to_string()))?),
                "learners" => learners = Some(parse_list(value, |s| Ok(s.to_string()))?),
                "regimes" => cfg.regimes = parse_list(value, RegimeSpec::parse)?,
                "horizons" => cfg.horizons = parse_list(value, |s| parse_num(key, s))?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(Error::Parse {
                        line: no + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        if methods.is_some() || learners.is_some() {
            let methods = methods.unwrap_or_else(|| Method::ALL.iter().map(|m| m.name().to_string()).collect());
            let learners = learners.unwrap_or_else(|| vec!["L1".to_string()]);
            cfg.cells = expand_cells(&methods, &learners)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<BenchConfig> {
        BenchConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("R must be at least 1".into()));
        }
        if self.n_subjects == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be at least 2".into()));
        }
        if self.horizons.is_empty() || self.cells.is_empty() || self.regimes.is_empty() {
            return Err(Error::Config("horizons, methods and regimes must be nonempty".into()));
        }
        if let Some(h) = self.horizons.iter().find(|&&h| h > self.horizon) {
            return Err(Error::Config(format!("horizon {h} exceeds K = {}", self.horizon)));
        }
        Ok(())
    }

    /// Seeds of the replicate panels.
    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.replications as u64)
            .map(|r| seeds::derive(self.seed, r))
            .collect()
    }
}

fn expand_cells(methods: &[String], learners: &[String]) -> Result<Vec<CellSpec>> {
    let mut cells = Vec::new();
    for m in methods {
        if m.contains(':') {
            cells.push(CellSpec::parse(m)?);
        } else if Method::parse(m)?.needs_learner() {
            for l in learners {
                cells.push(CellSpec::parse(&format!("{m}:{l}"))?);
            }
        } else {
            cells.push(CellSpec::parse(m)?);
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub learner: Option<String>,
    pub regime: RegimeSpec,
    #[serde(rename = "K")]
    pub horizon: usize,
    pub time_point: usize,
    pub truth: f64,
    pub truth_standard_error: f64,
    /// One entry per replicate; `None` where the cell failed.
    pub estimates: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
    pub mae: Option<f64>,
    pub esd: Option<f64>,
    pub runtime_secs: f64,
}

impl ReportRow {
    pub fn label(&self) -> String {
        match &self.learner {
            Some(l) => format!("{}-{}", self.method, l),
            None => self.method.to_string(),
        }
    }

    pub fn column(&self) -> String {
        format!("{}@{}", self.regime, self.time_point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub n_subjects: usize,
    #[serde(rename = "K")]
    pub horizon: usize,
    pub replications: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    /// Equality ignoring runtimes.
    pub fn same_results(&self, other: &ReportTable) -> bool {
        let strip = |t: &ReportTable| {
            let mut t = t.clone();
            t.rows.iter_mut().for_each(|r| r.runtime_secs = 0.0);
            t
        };
        strip(self) == strip(other)
    }

    pub fn row(&self, label: &str, regime: RegimeSpec, time_point: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.label() == label && r.regime == regime && r.time_point == time_point)
    }
}

/// Mean absolute error over the available estimates.
pub fn mean_absolute_error(estimates: &[f64], truth: f64) -> Option<f64> {
    if estimates.is_empty() {
        return None;
    }
    Some(estimates.iter().map(|e| (e - truth).abs()).sum::<f64>() / estimates.len() as f64)
}

/// Sample standard deviation; `None` below two values.
pub fn empirical_sd(estimates: &[f64]) -> Option<f64> {
    let n = estimates.len();
    if n < 2 {
        return None;
    }
    let mean = estimates.iter().sum::<f64>() / n as f64;
    Some((estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
}

struct CellResult {
    value: Result<Estimate>,
    secs: f64,
}

fn run_replicate(cfg: &BenchConfig, rep_seed: u64) -> Result<BTreeMap<(usize, usize, usize), CellResult>> {
    let panel = simulate_panel(&SimSpec::new(cfg.n_subjects, cfg.horizon, rep_seed))?;
    let mut out = BTreeMap::new();
    for (hi, &h) in cfg.horizons.iter().enumerate() {
        let mut msm_cache: Option<(Result<Vec<Estimate>>, f64)> = None;
        for (ci, cell) in cfg.cells.iter().enumerate() {
            for (ri, &regime) in cfg.regimes.iter().enumerate() {
                let cell_seed = seeds::derive(seeds::derive(rep_seed, ci as u64), (hi * 16 + ri) as u64);
                let ecfg = EstimatorConfig::new(cell.method, cell.learner.clone(), regime, h, cell_seed);
                let start = Instant::now();
                let value = if cell.method == Method::Msm {
                    let (all, secs) = msm_cache.get_or_insert_with(|| {
                        let t = Instant::now();
                        let r = msm_estimates(&panel, &RegimeSpec::ALL, &ecfg);
                        (r, t.elapsed().as_secs_f64())
                    });
                    let secs = *secs / RegimeSpec::ALL.len() as f64;
                    let value = match all {
                        Ok(v) => v
                            .iter()
                            .find(|e| e.regime == regime)
                            .cloned()
                            .ok_or_else(|| Error::State("missing MSM regime".into())),
                        Err(e) => Err(Error::Estimation {
                            step: h,
                            msg: e.to_string(),
                        }),
                    };
                    out.insert((hi, ci, ri), CellResult { value, secs });
                    continue;
                } else {
                    estimate(&panel, &ecfg)
                };
                if let Err(e) = &value {
                    log::warn!("cell {} {regime} K={h} seed {rep_seed:#x} failed: {e}", cell.label());
                }
                out.insert(
                    (hi, ci, ri),
                    CellResult {
                        value,
                        secs: start.elapsed().as_secs_f64(),
                    },
                );
            }
        }
    }
    Ok(out)
}

/// Runs the full grid. Ground truth is computed once per (regime, horizon)
/// and shared by all replicates; a failing cell is recorded in its row and
/// the run continues.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<ReportTable> {
    cfg.validate()?;
    let truth_seed = seeds::derive_label(cfg.seed, "truth");
    let mut truths = BTreeMap::new();
    for &h in &cfg.horizons {
        for &r in &cfg.regimes {
            let spec = SimSpec::new(1, h, truth_seed);
            truths.insert((h, r), counterfactual_truth(&spec, r, cfg.mc_samples)?);
        }
    }
    let rep_seeds = cfg.replicate_seeds();
    let reps: Vec<BTreeMap<(usize, usize, usize), CellResult>> = rep_seeds
        .par_iter()
        .map(|&s| run_replicate(cfg, s))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (ci, cell) in cfg.cells.iter().enumerate() {
        for (ri, &regime) in cfg.regimes.iter().enumerate() {
            for (hi, &h) in cfg.horizons.iter().enumerate() {
                let truth = &truths[&(h, regime)];
                let mut estimates = Vec::with_capacity(reps.len());
                let mut errors = Vec::with_capacity(reps.len());
                let mut secs = 0.0;
                for rep in &reps {
                    let res = &rep[&(hi, ci, ri)];
                    secs += res.secs;
                    match &res.value {
                        Ok(e) => {
                            estimates.push(Some(e.value));
                            errors.push(None);
                        }
                        Err(e) => {
                            estimates.push(None);
                            errors.push(Some(e.to_string()));
                        }
                    }
                }
                let ok: Vec<f64> = estimates.iter().flatten().copied().collect();
                rows.push(ReportRow {
                    method: cell.method,
                    learner: cell.learner.as_ref().map(|l| l.label().to_string()),
                    regime,
                    horizon: h,
                    time_point: h + 1,
                    truth: truth.value,
                    truth_standard_error: truth.mc_standard_error,
                    mae: mean_absolute_error(&ok, truth.value),
                    esd: empirical_sd(&ok),
                    estimates,
                    errors,
                    runtime_secs: secs,
                });
            }
        }
    }
    Ok(ReportTable {
        n_subjects: cfg.n_subjects,
        horizon: cfg.horizon,
        replications: cfg.replications,
        seed: cfg.seed,
        mc_samples: cfg.mc_samples,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReportFormat {
    /// `mae.csv` and `esd.csv`: one row per estimator, one column per
    /// regime and time point.
    Csv,
    /// `report.json`: the whole table.
    Json,
    /// `plotdata.csv`: tidy long format.
    PlotData,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotData];

    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "plotdata" => Ok(ReportFormat::PlotData),
            other => Err(Error::InvalidParameter(format!("unknown report format {other:?}"))),
        }
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

fn write_metric_csv(table: &ReportTable, path: &Path, metric: impl Fn(&ReportRow) -> Option<f64>) -> Result<()> {
    let mut columns: Vec<(RegimeSpec, usize)> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for r in &table.rows {
        if !columns.contains(&(r.regime, r.time_point)) {
            columns.push((r.regime, r.time_point));
        }
        if !labels.contains(&r.label()) {
            labels.push(r.label());
        }
    }
    columns.sort();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["estimator".to_string()];
    header.extend(columns.iter().map(|(r, t)| format!("{r}@{t}")));
    w.write_record(&header)?;
    for label in &labels {
        let mut rec = vec![label.clone()];
        for &(regime, t) in &columns {
            rec.push(fmt_cell(table.row(label, regime, t).and_then(&metric)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the requested formats into `dir` and returns the files written.
pub fn emit_report(table: &ReportTable, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    if formats.is_empty() {
        return Ok(Vec::new());
    }
    if table.rows.is_empty() {
        return Err(Error::InvalidParameter("report table is empty".into()));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                let mae = dir.join("mae.csv");
                write_metric_csv(table, &mae, |r| r.mae)?;
                let esd = dir.join("esd.csv");
                write_metric_csv(table, &esd, |r| r.esd)?;
                written.extend([mae, esd]);
            }
            ReportFormat::Json => {
                let p = dir.join("report.json");
                fs::write(&p, serde_json::to_string_pretty(table)?)?;
                written.push(p);
            }
            ReportFormat::PlotData => {
                let p = dir.join("plotdata.csv");
                let mut w = csv::Writer::from_path(&p)?;
                w.write_record(["method", "regime", "time", "metric", "value"])?;
                for r in &table.rows {
                    for (metric, v) in [("mae", r.mae), ("esd", r.esd)] {
                        w.write_record([r.label(), r.regime.to_string(), r.time_point.to_string(), metric.into(), fmt_cell(v)])?;
                    }
                }
                w.flush()?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<ReportTable> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
