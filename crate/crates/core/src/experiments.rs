//! Simulation studies and the fit command behind the CLI.
//!
//! Every run is a pure function of its config: replications draw from
//! streams derived from the seed and the cell they belong to, results are
//! collected in replication order, and all CSV output goes through one
//! formatter, so identical configs give byte-identical `results.csv`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{self, CrossCovariances, Drift, ReducedRank, WeightVector};
use crate::generators;
use crate::matops::{Mat, Vector};
use crate::model::{self, VecmParams};
use crate::rank::{self, BootstrapData, BootstrapOptions, CriticalValues, LrKind, LrSequence};
use crate::simulate::{self, Coordinates, LimitSpec, Noise, RngStream, SimOptions, Simulator, Trajectory};
use crate::stats::{self, KsResult};

pub const SCHEMA_LINE: &str = "# schema=v1";

/// Entries whose limit law is a point mass pass when the empirical spread is
/// below this fraction of the least squares spread for the same entry.
pub const COLLAPSE_RATIO: f64 = 0.1;

/// KS level for non-degenerate entries in the distribution comparison.
pub const KS_LEVEL: f64 = 0.001;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Mspe(MspeConfig),
    DistCompare(DistCompareConfig),
    RankBias(RankBiasConfig),
    Fit(FitConfig),
    Simulate(SimulateConfig),
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Mspe(_) => "mspe",
            ExperimentConfig::DistCompare(_) => "dist_compare",
            ExperimentConfig::RankBias(_) => "rank_bias",
            ExperimentConfig::Fit(_) => "fit",
            ExperimentConfig::Simulate(_) => "simulate",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::Mspe(c) => c.validate(),
            ExperimentConfig::DistCompare(c) => c.validate(),
            ExperimentConfig::RankBias(c) => c.validate(),
            ExperimentConfig::Fit(c) => c.validate(),
            ExperimentConfig::Simulate(c) => c.validate(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::Mspe(c) => c.seed = seed,
            ExperimentConfig::DistCompare(c) => c.seed = seed,
            ExperimentConfig::RankBias(c) => c.seed = seed,
            ExperimentConfig::Fit(c) => c.seed = seed,
            ExperimentConfig::Simulate(c) => c.seed = seed,
        }
    }

    /// Replications per cell, or trials for `simulate`.
    pub fn set_reps(&mut self, n: usize) -> Result<()> {
        match self {
            ExperimentConfig::Mspe(c) => c.n_reps = n,
            ExperimentConfig::DistCompare(c) => c.n_reps = n,
            ExperimentConfig::RankBias(c) => c.n_reps = n,
            ExperimentConfig::Simulate(c) => c.n_trials = n,
            ExperimentConfig::Fit(_) => return Err(Error::Config("--reps does not apply to fit".into())),
        }
        self.validate()
    }
}

fn check_reps(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("n_reps must be at least 1".into()));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Model generator or inline parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    GammaC {
        p: usize,
        c: f64,
        t: usize,
    },
    Appc2 {
        #[serde(default)]
        seed: u64,
    },
    Appc3 {
        lambda_min: f64,
        p: usize,
        r: usize,
    },
    Inline(VecmParams),
}

impl ModelSpec {
    pub fn build(&self) -> Result<VecmParams> {
        match self {
            ModelSpec::GammaC { p, c, t } => generators::gamma_c(*p, *c, *t),
            ModelSpec::Appc2 { seed } => generators::appc2(*seed),
            ModelSpec::Appc3 { lambda_min, p, r } => generators::appc3(*lambda_min, *p, *r),
            ModelSpec::Inline(params) => {
                params.validate()?;
                Ok(params.clone())
            }
        }
    }
}

/// How an estimator of `Π` picks its weights.
///
/// In JSON either an object tagged by `kind` or its label, e.g.
/// `"rank(1)"`, `"ls"`, `"hard(0.05)"`, `"hard(0.05,299)"`,
/// `"exp(1,0.5)"`, `"sigmoid(0.1,0.1)"`, `"weights(1,0.5,0)"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EstimatorRepr", into = "String")]
pub enum EstimatorSpec {
    Rank(usize),
    Ls,
    /// Post-selection at level `alpha`, with asymptotic critical values or
    /// `b` bootstrap draws per test.
    Hard {
        alpha: f64,
        b: Option<usize>,
    },
    Exp {
        a1: f64,
        a2: f64,
    },
    Sigmoid {
        a: f64,
        alpha: f64,
    },
    Weights(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EstimatorRepr {
    Label(String),
    Object(EstimatorObject),
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum EstimatorObject {
    Rank {
        k: usize,
    },
    Ls,
    Hard {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        b: Option<usize>,
    },
    Exp {
        a1: f64,
        a2: f64,
    },
    Sigmoid {
        a: f64,
        alpha: f64,
    },
    Weights {
        w: Vec<f64>,
    },
}

fn default_alpha() -> f64 {
    rank::DEFAULT_ALPHA
}

impl TryFrom<EstimatorRepr> for EstimatorSpec {
    type Error = Error;

    fn try_from(r: EstimatorRepr) -> Result<Self> {
        let spec = match r {
            EstimatorRepr::Label(s) => s.parse()?,
            EstimatorRepr::Object(o) => match o {
                EstimatorObject::Rank { k } => EstimatorSpec::Rank(k),
                EstimatorObject::Ls => EstimatorSpec::Ls,
                EstimatorObject::Hard { alpha, b } => EstimatorSpec::Hard { alpha, b },
                EstimatorObject::Exp { a1, a2 } => EstimatorSpec::Exp { a1, a2 },
                EstimatorObject::Sigmoid { a, alpha } => EstimatorSpec::Sigmoid { a, alpha },
                EstimatorObject::Weights { w } => EstimatorSpec::Weights(w),
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<EstimatorSpec> for String {
    fn from(e: EstimatorSpec) -> String {
        e.to_string()
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorSpec::Rank(k) => write!(f, "rank({k})"),
            EstimatorSpec::Ls => write!(f, "ls"),
            EstimatorSpec::Hard { alpha, b: None } => write!(f, "hard({alpha})"),
            EstimatorSpec::Hard { alpha, b: Some(b) } => write!(f, "hard({alpha},{b})"),
            EstimatorSpec::Exp { a1, a2 } => write!(f, "exp({a1},{a2})"),
            EstimatorSpec::Sigmoid { a, alpha } => write!(f, "sigmoid({a},{alpha})"),
            EstimatorSpec::Weights(w) => {
                let parts: Vec<String> = w.iter().map(|x| x.to_string()).collect();
                write!(f, "weights({})", parts.join(","))
            }
        }
    }
}

impl FromStr for EstimatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized estimator {s:?}"));
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            Some(_) => return Err(bad()),
            None => (s, ""),
        };
        let nums: Vec<f64> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',').map(|a| a.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let as_count = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
                Ok(x as usize)
            } else {
                Err(bad())
            }
        };
        let spec = match (name.trim(), nums.as_slice()) {
            ("rank", [k]) => EstimatorSpec::Rank(as_count(*k)?),
            ("ls", []) => EstimatorSpec::Ls,
            ("hard", []) => EstimatorSpec::Hard { alpha: rank::DEFAULT_ALPHA, b: None },
            ("hard", [alpha]) => EstimatorSpec::Hard { alpha: *alpha, b: None },
            ("hard", [alpha, b]) => EstimatorSpec::Hard { alpha: *alpha, b: Some(as_count(*b)?) },
            ("exp", [a1, a2]) => EstimatorSpec::Exp { a1: *a1, a2: *a2 },
            ("sigmoid", [a, alpha]) => EstimatorSpec::Sigmoid { a: *a, alpha: *alpha },
            ("weights", w) if !w.is_empty() => EstimatorSpec::Weights(w.to_vec()),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl EstimatorSpec {
    fn validate(&self) -> Result<()> {
        match self {
            EstimatorSpec::Rank(_) | EstimatorSpec::Ls => Ok(()),
            EstimatorSpec::Hard { alpha, b } => {
                check_alpha(*alpha)?;
                if *b == Some(0) {
                    return Err(Error::Config("bootstrap needs B >= 1".into()));
                }
                Ok(())
            }
            EstimatorSpec::Exp { a1, a2 } => {
                if !(*a1 > 0.0 && a1.is_finite() && *a2 >= 0.0 && a2.is_finite()) {
                    return Err(Error::Config(format!("exp weights need a1 > 0 and a2 >= 0, got {a1}, {a2}")));
                }
                Ok(())
            }
            EstimatorSpec::Sigmoid { a, alpha } => {
                if !(*a > 0.0 && a.is_finite()) {
                    return Err(Error::Config(format!("sigmoid weights need a > 0, got {a}")));
                }
                check_alpha(*alpha)
            }
            EstimatorSpec::Weights(w) => WeightVector::new(w.clone()).map(|_| ()),
        }
    }

    /// Checks that the estimator makes sense in dimension `p`.
    fn check_dim(&self, p: usize) -> Result<()> {
        match self {
            EstimatorSpec::Rank(k) if *k > p => Err(Error::InvalidRank { rank: *k, max: p }),
            EstimatorSpec::Weights(w) if w.len() != p => {
                Err(Error::InvalidWeights(format!("{self} has {} weights, expected {p}", w.len())))
            }
            _ => Ok(()),
        }
    }

    /// Significance level of the asymptotic critical values it needs.
    fn asymptotic_alpha(&self) -> Option<f64> {
        match self {
            EstimatorSpec::Hard { alpha, b: None } | EstimatorSpec::Sigmoid { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }

    /// Weights that do not depend on the data.
    pub fn fixed_weights(&self, p: usize) -> Option<Vec<f64>> {
        match self {
            EstimatorSpec::Rank(k) => Some(WeightVector::hard((*k).min(p), p).as_slice().to_vec()),
            EstimatorSpec::Ls => Some(vec![1.0; p]),
            EstimatorSpec::Weights(w) => Some(w.clone()),
            _ => None,
        }
    }
}

/// Settings for the simulated asymptotic trace critical values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    #[serde(default = "default_cv_sims")]
    pub n_sims: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
}

fn default_cv_sims() -> usize {
    20000
}

fn default_n_steps() -> usize {
    simulate::DEFAULT_N_STEPS
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { n_sims: default_cv_sims(), n_steps: default_n_steps() }
    }
}

/// Asymptotic critical values for every level used by an estimator list,
/// all computed from one set of draws.
struct CvTable(BTreeMap<u64, CriticalValues>);

impl CvTable {
    fn build(p: usize, estimators: &[EstimatorSpec], cfg: &CvConfig, stream: RngStream) -> Result<Self> {
        let alphas: Vec<f64> = estimators.iter().filter_map(EstimatorSpec::asymptotic_alpha).collect();
        let mut table = BTreeMap::new();
        if !alphas.is_empty() {
            let draws = rank::asymptotic_trace_draws(p, cfg.n_sims, cfg.n_steps, stream)?;
            for a in alphas {
                table.insert(a.to_bits(), rank::critical_values_from_draws(&draws, a, cfg.n_steps)?);
            }
        }
        Ok(CvTable(table))
    }

    fn get(&self, alpha: f64) -> &CriticalValues {
        &self.0[&alpha.to_bits()]
    }
}

/// Everything an estimator may look at when choosing its weights.
struct WeightContext<'a> {
    p: usize,
    lr: &'a LrSequence,
    cvs: &'a CvTable,
    /// Data and stream for bootstrap post-selection.
    trials: &'a [Trajectory],
    drift: Drift,
    stream: RngStream,
}

fn choose_weights(spec: &EstimatorSpec, idx: usize, ctx: &WeightContext<'_>) -> Result<WeightVector> {
    if let Some(w) = spec.fixed_weights(ctx.p) {
        return WeightVector::new(w);
    }
    match spec {
        EstimatorSpec::Hard { alpha, b: None } => rank::weights_hard(ctx.lr, ctx.cvs.get(*alpha)),
        EstimatorSpec::Hard { alpha, b: Some(b) } => {
            let opts = BootstrapOptions { b: *b, alpha: *alpha, kind: ctx.lr.kind, drift: ctx.drift };
            let data = BootstrapData::new(ctx.trials, opts)?;
            let (r, _) = data.select_rank_sequential(ctx.stream.replicate(idx as u64))?;
            Ok(WeightVector::hard(r, ctx.p))
        }
        EstimatorSpec::Exp { a1, a2 } => rank::weights_exp(ctx.lr, *a1, *a2),
        EstimatorSpec::Sigmoid { a, alpha } => rank::weights_sigmoid(ctx.lr, ctx.cvs.get(*alpha), *a),
        _ => unreachable!("fixed weights handled above"),
    }
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Shortest round-trip representation, empty for NaN.
fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:?}")
    }
}

/// CSV bytes starting with the schema line.
struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        CsvTable { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        writeln!(buf, "{SCHEMA_LINE}")?;
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        Ok(buf)
    }
}

/// Files produced by a run, written by [`write_outputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub results_csv: Vec<u8>,
    /// Additional files relative to the output directory.
    pub extra: Vec<(PathBuf, Vec<u8>)>,
    /// Experiment-specific entries for `meta.json`.
    pub meta: serde_json::Value,
}

/// Writes `results.csv`, the extra files and `meta.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput, wall_time_secs: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), &out.results_csv)?;
    for (name, bytes) in &out.extra {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
    }
    let meta = serde_json::json!({
        "schema": "v1",
        "experiment": cfg.name(),
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "wall_time_secs": wall_time_secs,
        "details": out.meta,
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Runs the configured experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg {
        ExperimentConfig::Mspe(c) => run_mspe(c)?.output(),
        ExperimentConfig::DistCompare(c) => run_dist_compare(c)?.output(),
        ExperimentConfig::RankBias(c) => run_rank_bias(c)?.output(),
        ExperimentConfig::Fit(c) => run_fit(c)?.output(),
        ExperimentConfig::Simulate(c) => run_simulate(c),
    }
}

fn mean_sd_columns(ws: &[Vec<f64>], p: usize) -> (Vec<f64>, Vec<f64>) {
    (0..p)
        .map(|i| {
            let col: Vec<f64> = ws.iter().map(|w| w[i]).collect();
            let (m, _) = stats::mean_se(&col);
            (m, if col.len() > 1 { stats::sd(&col) } else { f64::NAN })
        })
        .unzip()
}

// ---------------------------------------------------------------------------
// MSPE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MspeConfig {
    #[serde(default = "default_mspe_t")]
    pub t: usize,
    #[serde(default = "default_mspe_p")]
    pub p: Vec<usize>,
    #[serde(default = "default_mspe_c")]
    pub c: Vec<f64>,
    /// Replaces the `Γ_c` grid by a single model.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default = "default_mspe_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `rank(p/3)`, `rank(2p/3)`, `ls`, `hard(0.1)`,
    /// `exp(1,0.5)`, `exp(0.1,0.5)`, `sigmoid(0.1,0.1)`. The post-selection
    /// level matches the sigmoid weights, whose thresholds it shares.
    #[serde(default)]
    pub estimators: Option<Vec<EstimatorSpec>>,
    #[serde(default)]
    pub loss: MspeLoss,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// How a replication scores a forecast of `ΔY_{T+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MspeLoss {
    /// `T(tr Σ_Z + ‖(Π − Π̂)Y_T‖²)`, the expectation of the realized loss
    /// given the sample. Same mean, much smaller Monte Carlo error.
    #[default]
    Conditional,
    /// `T‖ΔY_{T+1} − Π̂Y_T‖²`.
    Realized,
}

fn default_mspe_t() -> usize {
    100
}

fn default_mspe_p() -> Vec<usize> {
    vec![3]
}

fn default_mspe_c() -> Vec<f64> {
    vec![0.0, 10.0, 20.0, 30.0]
}

fn default_mspe_reps() -> usize {
    20000
}

impl MspeConfig {
    pub fn validate(&self) -> Result<()> {
        check_reps(self.n_reps)?;
        if self.t < 2 {
            return Err(Error::Config(format!("T must be at least 2, got {}", self.t)));
        }
        for spec in self.cells() {
            let params = spec.build()?;
            for e in self.estimators_for(params.p()) {
                e.check_dim(params.p())?;
            }
        }
        Ok(())
    }

    fn cells(&self) -> Vec<ModelSpec> {
        match &self.model {
            Some(m) => vec![m.clone()],
            None => self
                .p
                .iter()
                .flat_map(|&p| self.c.iter().map(move |&c| ModelSpec::GammaC { p, c, t: self.t }))
                .collect(),
        }
    }

    fn estimators_for(&self, p: usize) -> Vec<EstimatorSpec> {
        match &self.estimators {
            Some(e) => e.clone(),
            None => vec![
                EstimatorSpec::Rank(p / 3),
                EstimatorSpec::Rank(2 * p / 3),
                EstimatorSpec::Ls,
                EstimatorSpec::Hard { alpha: 0.1, b: None },
                EstimatorSpec::Exp { a1: 1.0, a2: 0.5 },
                EstimatorSpec::Exp { a1: 0.1, a2: 0.5 },
                EstimatorSpec::Sigmoid { a: 0.1, alpha: 0.1 },
            ],
        }
    }
}

/// One `(p, c)` cell with per-replication losses kept for paired analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct MspeCell {
    pub p: usize,
    /// NaN when the cell comes from an explicit model.
    pub c: f64,
    pub estimators: Vec<EstimatorSpec>,
    /// Per-replication loss of estimator `e`, see [`MspeLoss`].
    pub losses: Vec<Vec<f64>>,
    pub mean_w: Vec<Vec<f64>>,
    pub sd_w: Vec<Vec<f64>>,
}

impl MspeCell {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.estimators.iter().position(|e| e.to_string() == label)
    }

    /// MSPE and its Monte Carlo standard error.
    pub fn mspe(&self, e: usize) -> (f64, f64) {
        stats::mean_se(&self.losses[e])
    }

    /// `MSPE_a − MSPE_b` and the pooled standard error `√(se_a² + se_b²)`.
    pub fn difference(&self, a: usize, b: usize) -> (f64, f64) {
        let (ma, sa) = self.mspe(a);
        let (mb, sb) = self.mspe(b);
        (ma - mb, sa.hypot(sb))
    }

    /// `MSPE_a − MSPE_b` and the standard error of the paired differences.
    pub fn paired_difference(&self, a: usize, b: usize) -> (f64, f64) {
        let d: Vec<f64> = self.losses[a].iter().zip(&self.losses[b]).map(|(x, y)| x - y).collect();
        stats::mean_se(&d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MspeResults {
    pub t: usize,
    pub cells: Vec<MspeCell>,
}

impl MspeResults {
    pub fn cell(&self, p: usize, c: f64) -> Option<&MspeCell> {
        self.cells.iter().find(|x| x.p == p && x.c == c)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let pmax = self.cells.iter().map(|c| c.p).max().unwrap_or(0);
        let mut header: Vec<String> = ["estimator", "p", "c", "mspe", "mc_stderr"].map(String::from).to_vec();
        header.extend((1..=pmax).map(|i| format!("mean_w{i}")));
        header.extend((1..=pmax).map(|i| format!("sd_w{i}")));
        let mut t = CsvTable::new(header);
        for cell in &self.cells {
            for (e, spec) in cell.estimators.iter().enumerate() {
                let (m, se) = cell.mspe(e);
                let mut row = vec![spec.to_string(), cell.p.to_string(), num(cell.c), num(m), num(se)];
                let pad =
                    |v: &[f64]| (0..pmax).map(|i| v.get(i).map_or(String::new(), |x| num(*x))).collect::<Vec<_>>();
                row.extend(pad(&cell.mean_w[e]));
                row.extend(pad(&cell.sd_w[e]));
                t.push(row);
            }
        }
        t.to_bytes()
    }

    fn output(&self) -> Result<RunOutput> {
        Ok(RunOutput {
            results_csv: self.to_csv()?,
            extra: Vec::new(),
            meta: serde_json::json!({ "t": self.t, "cells": self.cells.len() }),
        })
    }
}

/// Losses and weights of every estimator for one replication.
fn mspe_replication(
    sim: &Simulator<'_>,
    params: &VecmParams,
    loss: MspeLoss,
    t: usize,
    estimators: &[EstimatorSpec],
    cvs: &CvTable,
    stream: RngStream,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let full = sim.run(t + 1, stream, Noise::Gaussian, &SimOptions::default())?;
    let p = full.p();
    let train = Trajectory::new(full.data.rows(0, t + 1).into_owned(), full.coords)?;
    let s = estimate::cross_covariances(std::slice::from_ref(&train), Drift::None)?;
    let t_eff = s.t_effective;
    let rr = ReducedRank::new(s)?;
    let lr = rank::lr_statistics(rr.eig.values.as_slice(), t_eff, LrKind::Trace)?;
    let ctx = WeightContext {
        p,
        lr: &lr,
        cvs,
        trials: std::slice::from_ref(&train),
        drift: Drift::None,
        stream: stream.replicate(1),
    };
    let y_t = full.data.row(t).transpose();
    let dy = full.data.row(t + 1).transpose() - &y_t;
    let pi = params.pi();
    let noise = params.sigma_z.trace();
    let mut losses = Vec::with_capacity(estimators.len());
    let mut weights = Vec::with_capacity(estimators.len());
    for (i, e) in estimators.iter().enumerate() {
        let w = choose_weights(e, i, &ctx)?;
        let pi_hat = rr.pi_weighted(&w)?;
        let l = match loss {
            MspeLoss::Realized => (&dy - pi_hat * &y_t).norm_squared(),
            MspeLoss::Conditional => noise + ((&pi - pi_hat) * &y_t).norm_squared(),
        };
        losses.push(t as f64 * l);
        weights.push(w.as_slice().to_vec());
    }
    Ok((losses, weights))
}

/// Prediction benchmark over the `Γ_c` grid (or one explicit model).
///
/// Replication `j` of the cell `(p, c)` draws from
/// `RngStream::new(seed, 0).replicate(p).replicate(c.to_bits()).offset(j)`,
/// so adding grid points leaves existing cells unchanged.
pub fn run_mspe(cfg: &MspeConfig) -> Result<MspeResults> {
    cfg.validate()?;
    let base = RngStream::new(cfg.seed, 0);
    let mut cv_cache: BTreeMap<usize, CvTable> = BTreeMap::new();
    let mut cells = Vec::new();
    for spec in cfg.cells() {
        let params = spec.build()?;
        let p = params.p();
        let estimators = cfg.estimators_for(p);
        if let std::collections::btree_map::Entry::Vacant(e) = cv_cache.entry(p) {
            let table = CvTable::build(p, &estimators, &cfg.cv, base.replicate(u64::MAX))?;
            e.insert(table);
        }
        let cvs = &cv_cache[&p];
        let c = match spec {
            ModelSpec::GammaC { c, .. } => c,
            _ => f64::NAN,
        };
        let cell_stream = base.replicate(p as u64).replicate(c.to_bits());
        let sim = Simulator::new(&params)?;
        let reps: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..cfg.n_reps as u64)
            .into_par_iter()
            .map(|j| mspe_replication(&sim, &params, cfg.loss, cfg.t, &estimators, cvs, cell_stream.offset(j)))
            .collect::<Result<_>>()?;
        let losses: Vec<Vec<f64>> = (0..estimators.len()).map(|e| reps.iter().map(|r| r.0[e]).collect()).collect();
        let (mean_w, sd_w) = (0..estimators.len())
            .map(|e| {
                let ws: Vec<Vec<f64>> = reps.iter().map(|r| r.1[e].clone()).collect();
                mean_sd_columns(&ws, p)
            })
            .unzip();
        log::info!("mspe cell p = {p}, c = {c} done");
        cells.push(MspeCell { p, c, estimators, losses, mean_w, sd_w });
    }
    Ok(MspeResults { t: cfg.t, cells })
}

// ---------------------------------------------------------------------------
// Distribution comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistCompareConfig {
    #[serde(default = "default_dist_model")]
    pub model: ModelSpec,
    #[serde(default = "default_dist_t")]
    pub t: usize,
    #[serde(default = "default_dist_reps")]
    pub n_reps: usize,
    /// Draws from the limit law; defaults to `n_reps`.
    #[serde(default)]
    pub n_limit: Option<usize>,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fixed-weight estimators only. Defaults to ranks `1`, `r` and `p`.
    #[serde(default)]
    pub estimators: Option<Vec<EstimatorSpec>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_dist_model() -> ModelSpec {
    ModelSpec::Appc2 { seed: 0 }
}

fn default_dist_t() -> usize {
    5000
}

fn default_dist_reps() -> usize {
    1000
}

impl DistCompareConfig {
    pub fn validate(&self) -> Result<()> {
        check_reps(self.n_reps)?;
        if self.n_limit == Some(0) {
            return Err(Error::Config("n_limit must be at least 1".into()));
        }
        if self.t < 2 {
            return Err(Error::Config(format!("T must be at least 2, got {}", self.t)));
        }
        if self.n_steps < 100 {
            return Err(Error::InvalidSteps(self.n_steps));
        }
        let params = self.model.build()?;
        let (p, r) = (params.p(), params.r());
        if r == 0 || r == p {
            return Err(Error::Config(format!("distribution comparison needs 0 < r < p, got r = {r}, p = {p}")));
        }
        for e in self.estimators_for(p, r) {
            e.check_dim(p)?;
            if e.fixed_weights(p).is_none() {
                return Err(Error::Config(format!("{e} has data-dependent weights without a sampled limit law")));
            }
        }
        Ok(())
    }

    fn estimators_for(&self, p: usize, r: usize) -> Vec<EstimatorSpec> {
        match &self.estimators {
            Some(e) => e.clone(),
            None => {
                let mut v = vec![EstimatorSpec::Rank(1), EstimatorSpec::Rank(r), EstimatorSpec::Rank(p)];
                v.dedup();
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Empirical,
    Asymptotic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Empirical => "empirical",
            Source::Asymptotic => "asymptotic",
        })
    }
}

/// Scaled deviations of one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct DistEstimator {
    pub spec: EstimatorSpec,
    pub weights: Vec<f64>,
    /// The `r × r` centering subtracted from the scaled `11` block.
    pub bias: Mat,
    /// `[√T(Γ̂^{·1} − Γ^{·1} − b), T(Γ̂^{·2} − Γ^{·2})]` per replication.
    pub empirical: Vec<Mat>,
    pub asymptotic: Vec<Mat>,
}

/// One matrix entry in the KS summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsEntry {
    pub estimator: String,
    pub block: String,
    /// 1-based.
    pub i: usize,
    pub j: usize,
    pub ks: KsResult,
    /// The limit law puts all mass at zero.
    pub degenerate: bool,
    /// Empirical standard deviation relative to the least squares one.
    pub collapse_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistCompareResults {
    pub p: usize,
    pub r: usize,
    pub t: usize,
    pub estimators: Vec<DistEstimator>,
    /// Empirical deviations of the least squares estimator, the scale
    /// reference for degenerate entries.
    pub reference: Vec<Mat>,
    pub gaussian_cumulants_assumed: bool,
}

fn block_name(i: usize, j: usize, r: usize) -> &'static str {
    match (i < r, j < r) {
        (true, true) => "11",
        (true, false) => "12",
        (false, true) => "21",
        (false, false) => "22",
    }
}

fn entry(draws: &[Mat], i: usize, j: usize) -> Vec<f64> {
    draws.iter().map(|m| m[(i, j)]).collect()
}

impl DistCompareResults {
    pub fn estimator(&self, label: &str) -> Option<&DistEstimator> {
        self.estimators.iter().find(|e| e.spec.to_string() == label)
    }

    /// Per-entry comparison of empirical and limit-law draws.
    pub fn ks_table(&self) -> Vec<KsEntry> {
        let mut out = Vec::new();
        for est in &self.estimators {
            for i in 0..self.p {
                for j in 0..self.p {
                    let emp = entry(&est.empirical, i, j);
                    let asy = entry(&est.asymptotic, i, j);
                    let ks = stats::ks_two_sample(&emp, &asy);
                    let degenerate = asy.iter().all(|x| x.abs() <= 1e-12);
                    let collapse_ratio = stats::sd(&emp) / stats::sd(&entry(&self.reference, i, j));
                    let pass = if degenerate { collapse_ratio < COLLAPSE_RATIO } else { ks.p_value > KS_LEVEL };
                    out.push(KsEntry {
                        estimator: est.spec.to_string(),
                        block: block_name(i, j, self.r).into(),
                        i: i + 1,
                        j: j + 1,
                        ks,
                        degenerate,
                        collapse_ratio,
                        pass,
                    });
                }
            }
        }
        out
    }

    /// Fraction of passing entries per estimator.
    pub fn pass_rates(&self) -> Vec<(String, f64)> {
        let table = self.ks_table();
        self.estimators
            .iter()
            .map(|e| {
                let label = e.spec.to_string();
                let rows: Vec<&KsEntry> = table.iter().filter(|k| k.estimator == label).collect();
                let rate = rows.iter().filter(|k| k.pass).count() as f64 / rows.len() as f64;
                (label, rate)
            })
            .collect()
    }

    /// KS tests of the first `r` columns of two estimators on disjoint
    /// halves of the replications, so the two samples are independent.
    pub fn left_column_ks(&self, a: &str, b: &str) -> Option<Vec<(usize, usize, KsResult)>> {
        let ea = self.estimator(a)?;
        let eb = self.estimator(b)?;
        let n = ea.empirical.len();
        let half = n / 2;
        let mut out = Vec::new();
        for j in 0..self.r {
            for i in 0..self.p {
                let x = entry(&ea.empirical[..half], i, j);
                let y = entry(&eb.empirical[half..], i, j);
                out.push((i + 1, j + 1, stats::ks_two_sample(&x, &y)));
            }
        }
        Some(out)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(["source", "estimator", "rep", "block", "i", "j", "value"]);
        for est in &self.estimators {
            let label = est.spec.to_string();
            for (source, draws) in [(Source::Empirical, &est.empirical), (Source::Asymptotic, &est.asymptotic)] {
                for (rep, m) in draws.iter().enumerate() {
                    for i in 0..self.p {
                        for j in 0..self.p {
                            t.push(vec![
                                source.to_string(),
                                label.clone(),
                                rep.to_string(),
                                block_name(i, j, self.r).into(),
                                (i + 1).to_string(),
                                (j + 1).to_string(),
                                num(m[(i, j)]),
                            ]);
                        }
                    }
                }
            }
        }
        t.to_bytes()
    }

    pub fn ks_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new([
            "estimator",
            "block",
            "i",
            "j",
            "ks_statistic",
            "p_value",
            "degenerate",
            "collapse_ratio",
            "pass",
        ]);
        for k in self.ks_table() {
            t.push(vec![
                k.estimator,
                k.block,
                k.i.to_string(),
                k.j.to_string(),
                num(k.ks.statistic),
                num(k.ks.p_value),
                k.degenerate.to_string(),
                num(k.collapse_ratio),
                k.pass.to_string(),
            ]);
        }
        t.to_bytes()
    }

    fn output(&self) -> Result<RunOutput> {
        let rates: BTreeMap<String, f64> = self.pass_rates().into_iter().collect();
        Ok(RunOutput {
            results_csv: self.to_csv()?,
            extra: vec![(PathBuf::from("ks.csv"), self.ks_csv()?)],
            meta: serde_json::json!({
                "p": self.p,
                "r": self.r,
                "t": self.t,
                "gaussian_cumulants_assumed": self.gaussian_cumulants_assumed,
                "ks_pass_rates": rates,
            }),
        })
    }
}

/// `√T` on the first `r` columns after removing the centering, `T` on
/// the rest.
fn scale_deviation(dev: &Mat, bias: &Mat, r: usize, t: usize) -> Mat {
    let mut out = dev.clone();
    let p = dev.nrows();
    let st = (t as f64).sqrt();
    let mut left = out.columns_mut(0, r);
    left.view_mut((0, 0), (r, r)).zip_apply(bias, |o, b| *o -= b);
    left *= st;
    out.columns_mut(r, p - r).scale_mut(t as f64);
    out
}

/// Empirical scaled deviations in Q-coordinates against draws of the limit
/// law, for fixed-weight estimators.
///
/// Replication `j` uses `RngStream::new(seed, 0).replicate(0).offset(j)`;
/// the limit law of estimator `e` uses `replicate(1).replicate(e)`.
pub fn run_dist_compare(cfg: &DistCompareConfig) -> Result<DistCompareResults> {
    cfg.validate()?;
    let params = cfg.model.build()?;
    let (p, r, t) = (params.p(), params.r(), cfg.t);
    let specs = cfg.estimators_for(p, r);
    let qt = model::q_transform(&params)?;
    let weights: Vec<Vec<f64>> = specs.iter().map(|e| e.fixed_weights(p).expect("validated")).collect();
    let biases: Vec<Mat> = weights
        .iter()
        .map(|w| {
            if w[..r].iter().all(|&x| x == 1.0) {
                Ok(Mat::zeros(r, r))
            } else {
                Ok(crate::asymcov::weight_asymptotics(&params, w)?.b_w)
            }
        })
        .collect::<Result<_>>()?;
    let sim = Simulator::new(&params)?;
    let base = RngStream::new(cfg.seed, 0);
    let emp_stream = base.replicate(0);
    let per_rep: Vec<(Vec<Mat>, Mat)> = (0..cfg.n_reps as u64)
        .into_par_iter()
        .map(|j| {
            let y = sim.run(t, emp_stream.offset(j), Noise::Gaussian, &SimOptions::default())?;
            let x = y.to_q(&qt.q);
            let s = estimate::cross_covariances(std::slice::from_ref(&x), Drift::None)?;
            let rr = ReducedRank::new(s)?;
            let devs = weights
                .iter()
                .zip(&biases)
                .map(|(w, b)| {
                    let g = rr.pi_weighted(&WeightVector::new(w.clone())?)?;
                    Ok(scale_deviation(&(g - &qt.gamma), b, r, t))
                })
                .collect::<Result<Vec<Mat>>>()?;
            let ls = rr.pi_rank(p)?;
            Ok((devs, scale_deviation(&(ls - &qt.gamma), &Mat::zeros(r, r), r, t)))
        })
        .collect::<Result<_>>()?;
    let n_limit = cfg.n_limit.unwrap_or(cfg.n_reps);
    let law_stream = base.replicate(1);
    let mut estimators = Vec::new();
    for (e, ((spec, w), bias)) in specs.iter().zip(weights).zip(biases).enumerate() {
        let asymptotic = simulate::sample_limit_law(
            &params,
            &LimitSpec::Weights(w.clone()),
            n_limit,
            cfg.n_steps,
            law_stream.replicate(e as u64),
        )?;
        let empirical = per_rep.iter().map(|(d, _)| d[e].clone()).collect();
        estimators.push(DistEstimator { spec: spec.clone(), weights: w, bias, empirical, asymptotic });
    }
    let reference = per_rep.into_iter().map(|(_, ls)| ls).collect();
    Ok(DistCompareResults { p, r, t, estimators, reference, gaussian_cumulants_assumed: true })
}

// ---------------------------------------------------------------------------
// Rank selection against bias
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankBiasConfig {
    #[serde(default = "default_rb_p")]
    pub p: usize,
    #[serde(default = "default_rb_r")]
    pub r: usize,
    #[serde(default = "default_rb_t")]
    pub t: usize,
    #[serde(default = "default_rb_lambda")]
    pub lambda_min: Vec<f64>,
    #[serde(default = "default_rb_reps")]
    pub n_reps: usize,
    #[serde(default = "default_rb_b")]
    pub b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub kind: LrKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_rb_p() -> usize {
    8
}

fn default_rb_r() -> usize {
    4
}

fn default_rb_t() -> usize {
    200
}

fn default_rb_lambda() -> Vec<f64> {
    vec![0.01, 0.03, 0.1, 0.3]
}

fn default_rb_reps() -> usize {
    200
}

fn default_rb_b() -> usize {
    rank::DEFAULT_BOOTSTRAP_B
}

impl RankBiasConfig {
    pub fn validate(&self) -> Result<()> {
        check_reps(self.n_reps)?;
        check_alpha(self.alpha)?;
        if self.b == 0 {
            return Err(Error::Config("bootstrap needs B >= 1".into()));
        }
        if self.t < 2 {
            return Err(Error::Config(format!("T must be at least 2, got {}", self.t)));
        }
        if self.lambda_min.is_empty() {
            return Err(Error::Config("lambda_min list is empty".into()));
        }
        for &l in &self.lambda_min {
            generators::appc3(l, self.p, self.r)?;
        }
        if self.p > 8 {
            log::warn!("rank_bias at p = {} with B = {} bootstrap draws per test is slow", self.p, self.b);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankBiasCell {
    pub lambda_min: f64,
    /// `histogram[k]` counts replications with `r̂ = k`, `k = 0..p`.
    pub histogram: Vec<usize>,
    pub mean_rank: f64,
    pub mean_rank_se: f64,
    /// `‖b̃_k‖_F` for `k = 0..r`.
    pub bias_norms: Vec<f64>,
    pub pi_norm_sq: f64,
    pub pi_norm_sq_closed_form: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankBiasResults {
    pub p: usize,
    pub r: usize,
    pub cells: Vec<RankBiasCell>,
}

impl RankBiasResults {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(["kind", "lambda_min", "k", "value", "stderr"]);
        for c in &self.cells {
            let l = num(c.lambda_min);
            for (k, n) in c.histogram.iter().enumerate() {
                t.push(vec!["rank_hist".into(), l.clone(), k.to_string(), n.to_string(), String::new()]);
            }
            t.push(vec!["mean_rank".into(), l.clone(), String::new(), num(c.mean_rank), num(c.mean_rank_se)]);
            for (k, b) in c.bias_norms.iter().enumerate() {
                t.push(vec!["bias_norm".into(), l.clone(), k.to_string(), num(*b), String::new()]);
            }
            t.push(vec!["pi_norm_sq".into(), l.clone(), String::new(), num(c.pi_norm_sq), String::new()]);
            t.push(vec![
                "pi_norm_sq_closed_form".into(),
                l.clone(),
                String::new(),
                num(c.pi_norm_sq_closed_form),
                String::new(),
            ]);
        }
        t.to_bytes()
    }

    fn output(&self) -> Result<RunOutput> {
        Ok(RunOutput {
            results_csv: self.to_csv()?,
            extra: Vec::new(),
            meta: serde_json::json!({ "p": self.p, "r": self.r }),
        })
    }
}

/// Bootstrap rank selection and the asymptotic bias curve for each
/// `λ_min`.
///
/// Replication `j` for `λ_min` simulates from
/// `RngStream::new(seed, 0).replicate(λ_min.to_bits()).offset(j)` and
/// bootstraps from that stream's `replicate(1)`.
pub fn run_rank_bias(cfg: &RankBiasConfig) -> Result<RankBiasResults> {
    cfg.validate()?;
    let base = RngStream::new(cfg.seed, 0);
    let opts = BootstrapOptions { b: cfg.b, alpha: cfg.alpha, kind: cfg.kind, drift: Drift::None };
    let mut cells = Vec::new();
    for &lmin in &cfg.lambda_min {
        let params = generators::appc3(lmin, cfg.p, cfg.r)?;
        let sim = Simulator::new(&params)?;
        let stream = base.replicate(lmin.to_bits());
        let ranks: Vec<usize> = (0..cfg.n_reps as u64)
            .into_par_iter()
            .map(|j| {
                let s = stream.offset(j);
                let y = sim.run(cfg.t, s, Noise::Gaussian, &SimOptions::default())?;
                let data = BootstrapData::new(std::slice::from_ref(&y), opts)?;
                Ok(data.select_rank_sequential(s.replicate(1))?.0)
            })
            .collect::<Result<_>>()?;
        let mut histogram = vec![0; cfg.p + 1];
        for &k in &ranks {
            histogram[k] += 1;
        }
        let as_f: Vec<f64> = ranks.iter().map(|&k| k as f64).collect();
        let (mean_rank, mean_rank_se) = stats::mean_se(&as_f);
        let bias_norms = (0..=cfg.r)
            .map(|k| Ok(model::asymptotic_bias(&params, k)?.b_tilde.norm()))
            .collect::<Result<Vec<f64>>>()?;
        log::info!("rank_bias lambda_min = {lmin}: mean rank {mean_rank:.3}");
        cells.push(RankBiasCell {
            lambda_min: lmin,
            histogram,
            mean_rank,
            mean_rank_se,
            bias_norms,
            pi_norm_sq: params.pi().norm_squared(),
            pi_norm_sq_closed_form: generators::appc3_pi_norm_sq(cfg.r),
        });
    }
    Ok(RankBiasResults { p: cfg.p, r: cfg.r, cells })
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// A CSV file or a directory of CSV files, one trial each.
    pub input: PathBuf,
    #[serde(default)]
    pub drift: Drift,
    /// VAR order `d`; the model has `d − 1` lagged differences.
    #[serde(default = "default_lag_order")]
    pub lag_order: usize,
    #[serde(default = "default_fit_estimators")]
    pub estimators: Vec<EstimatorSpec>,
    /// Fraction of each trial's transitions held out at the end.
    #[serde(default)]
    pub holdout: f64,
    #[serde(default)]
    pub kind: LrKind,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_lag_order() -> usize {
    1
}

fn default_fit_estimators() -> Vec<EstimatorSpec> {
    vec![EstimatorSpec::Ls]
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lag_order == 0 {
            return Err(Error::Config("lag_order must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout must lie in [0, 1), got {}", self.holdout)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators".into()));
        }
        let boot = self.estimators.iter().any(|e| matches!(e, EstimatorSpec::Hard { b: Some(_), .. }));
        if boot && self.lag_order > 1 {
            return Err(Error::Config("bootstrap critical values need lag_order = 1".into()));
        }
        Ok(())
    }
}

/// Reads one trial file, or every `*.csv` in a directory in name order.
pub fn read_trials(path: &Path) -> Result<(Vec<PathBuf>, Vec<Trajectory>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Config(format!("no CSV files in {}", path.display())));
    }
    let trials = files
        .iter()
        .map(|f| {
            let file = fs::File::open(f)?;
            Trajectory::read_csv(std::io::BufReader::new(file)).map_err(|e| match e {
                Error::Parse { row, col, msg } => Error::Parse { row, col, msg: format!("{}: {msg}", f.display()) },
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let p = trials[0].p();
    if let Some((f, t)) = files.iter().zip(&trials).find(|(_, t)| t.p() != p) {
        return Err(Error::dims(format!("{} has {} columns, expected {p}", f.display(), t.p())));
    }
    Ok((files, trials))
}

/// One fitted estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedEstimator {
    pub spec: EstimatorSpec,
    pub result: estimate::EstimatorResult,
    pub psi: Vec<Mat>,
    pub intercept: Option<Vector>,
    /// Mean squared one-step error per trial on the training and test parts;
    /// `None` when a part is empty.
    pub train_mse: Vec<Option<f64>>,
    pub test_mse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResults {
    pub files: Vec<PathBuf>,
    pub p: usize,
    pub lr: LrSequence,
    pub critical_values: Vec<CriticalValues>,
    pub estimators: Vec<FittedEstimator>,
    /// Transitions used for training in each trial.
    pub t_train: Vec<usize>,
    pub t_total: Vec<usize>,
}

/// One-step errors `ΔY_t − Π̂Y_{t−1} − ΣΨ̂_iΔY_{t−i} − μ̂` for `t` in
/// `from..=to`.
fn one_step_mse(tr: &Trajectory, pi: &Mat, psi: &[Mat], mu: Option<&Vector>, from: usize, to: usize) -> Option<f64> {
    if from > to {
        return None;
    }
    let row = |t: usize| tr.data.row(t).transpose();
    let mut total = 0.0;
    for t in from..=to {
        let mut e = row(t) - row(t - 1) - pi * row(t - 1);
        for (i, ps) in psi.iter().enumerate() {
            let lag = t - 1 - i;
            e -= ps * (row(lag) - row(lag - 1));
        }
        if let Some(m) = mu {
            e -= m;
        }
        total += e.norm_squared();
    }
    Some(total / (to - from + 1) as f64)
}

/// Pooled estimation on the leading part of every trial and one-step
/// errors on both parts.
pub fn run_fit(cfg: &FitConfig) -> Result<FitResults> {
    cfg.validate()?;
    let (files, trials) = read_trials(&cfg.input)?;
    let p = trials[0].p();
    for e in &cfg.estimators {
        e.check_dim(p)?;
    }
    let d = cfg.lag_order;
    let t_total: Vec<usize> = trials.iter().map(Trajectory::t).collect();
    let t_train: Vec<usize> = t_total.iter().map(|&t| t - ((t as f64) * cfg.holdout).floor() as usize).collect();
    let train: Vec<Trajectory> = trials
        .iter()
        .zip(&t_train)
        .map(|(tr, &n)| Trajectory::new(tr.data.rows(0, n + 1).into_owned(), tr.coords))
        .collect::<Result<_>>()?;
    let conc = estimate::concentrate_lags(&train, d, cfg.drift)?;
    let s: CrossCovariances = conc.cross_covariances()?;
    let t_eff = s.t_effective;
    let rr = ReducedRank::new(s)?;
    let lr = rank::lr_statistics(rr.eig.values.as_slice(), t_eff, cfg.kind)?;
    let base = RngStream::new(cfg.seed, 0);
    let cvs = CvTable::build(p, &cfg.estimators, &cfg.cv, base.replicate(u64::MAX))?;
    let ctx = WeightContext { p, lr: &lr, cvs: &cvs, trials: &train, drift: cfg.drift, stream: base.replicate(1) };
    let mut estimators = Vec::new();
    for (i, spec) in cfg.estimators.iter().enumerate() {
        let w = choose_weights(spec, i, &ctx)?;
        let mut result = rr.weighted(&w)?;
        if let Some(k) = (0..=p).find(|&k| w.as_slice() == WeightVector::hard(k, p).as_slice()) {
            result.rank_spec = estimate::RankSpec::Fixed(k);
        }
        let psi = estimate::psi_estimate(&train, &result.pi_hat, d, cfg.drift)?;
        let intercept = match cfg.drift {
            Drift::None => None,
            Drift::Constant => {
                let mut sum = Vector::zeros(p);
                let mut n = 0usize;
                for tr in &train {
                    for t in d..=tr.t() {
                        let row = |t: usize| tr.data.row(t).transpose();
                        let mut e = row(t) - row(t - 1) - &result.pi_hat * row(t - 1);
                        for (k, ps) in psi.iter().enumerate() {
                            e -= ps * (row(t - 1 - k) - row(t - 2 - k));
                        }
                        sum += e;
                        n += 1;
                    }
                }
                Some(sum / n as f64)
            }
        };
        let mut train_mse = Vec::new();
        let mut test_mse = Vec::new();
        for ((tr, &n), &tot) in trials.iter().zip(&t_train).zip(&t_total) {
            train_mse.push(one_step_mse(tr, &result.pi_hat, &psi, intercept.as_ref(), d, n));
            test_mse.push(one_step_mse(tr, &result.pi_hat, &psi, intercept.as_ref(), n + 1, tot));
        }
        estimators.push(FittedEstimator { spec: spec.clone(), result, psi, intercept, train_mse, test_mse });
    }
    let critical_values = cvs.0.into_values().collect();
    Ok(FitResults { files, p, lr, critical_values, estimators, t_train, t_total })
}

impl FitResults {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(["estimator", "trial", "split", "n", "mse"]);
        for e in &self.estimators {
            for (i, (tr, te)) in e.train_mse.iter().zip(&e.test_mse).enumerate() {
                let n_train = self.t_train[i].to_string();
                let n_test = (self.t_total[i] - self.t_train[i]).to_string();
                for (split, n, v) in [("train", n_train, tr), ("test", n_test, te)] {
                    if let Some(v) = v {
                        t.push(vec![e.spec.to_string(), i.to_string(), split.into(), n, num(*v)]);
                    }
                }
            }
        }
        t.to_bytes()
    }

    pub fn estimates_json(&self) -> Result<serde_json::Value> {
        let ests = self
            .estimators
            .iter()
            .map(|e| {
                let psi: Vec<crate::serde_mat::MatrixDoc> =
                    e.psi.iter().map(crate::serde_mat::MatrixDoc::from).collect();
                Ok(serde_json::json!({
                    "label": e.spec.to_string(),
                    "estimate": e.result.to_json_value()?,
                    "psi": psi,
                    "intercept": e.intercept.as_ref().map(|v| v.as_slice().to_vec()),
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        let files: Vec<String> = self.files.iter().map(|f| f.display().to_string()).collect();
        Ok(serde_json::json!({
            "files": files,
            "p": self.p,
            "lr": self.lr,
            "critical_values": self.critical_values,
            "estimators": ests,
        }))
    }

    fn output(&self) -> Result<RunOutput> {
        let est = serde_json::to_vec_pretty(&self.estimates_json()?)?;
        Ok(RunOutput {
            results_csv: self.to_csv()?,
            extra: vec![(PathBuf::from("estimates.json"), est)],
            meta: serde_json::json!({ "trials": self.files.len(), "p": self.p }),
        })
    }
}

// ---------------------------------------------------------------------------
// Simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: ModelSpec,
    pub t: usize,
    #[serde(default = "default_n_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_coords")]
    pub coords: Coordinates,
    #[serde(default)]
    pub stationary_init: bool,
    #[serde(default)]
    pub drift: Option<Vec<f64>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_n_trials() -> usize {
    1
}

fn default_coords() -> Coordinates {
    Coordinates::Original
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        if self.t == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        let params = self.model.build()?;
        if let Some(mu) = &self.drift {
            if mu.len() != params.p() {
                return Err(Error::dims(format!("drift has length {}, expected {}", mu.len(), params.p())));
            }
        }
        Ok(())
    }
}

/// Writes trial `i` from `RngStream::new(seed, 0).offset(i)` to
/// `trials/trial_<i>.csv`.
pub fn run_simulate(cfg: &SimulateConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let params = cfg.model.build()?;
    let sim = Simulator::new(&params)?;
    let opts = SimOptions {
        y0: None,
        drift: cfg.drift.as_ref().map(|v| Vector::from_vec(v.clone())),
        stationary_init: cfg.stationary_init,
    };
    let q = match cfg.coords {
        Coordinates::Original => None,
        Coordinates::QTransformed => Some(model::q_transform(&params)?.q),
    };
    let base = RngStream::new(cfg.seed, 0);
    let width = cfg.n_trials.saturating_sub(1).to_string().len().max(3);
    let files: Vec<(PathBuf, Vec<u8>)> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|i| {
            let mut y = sim.run(cfg.t, base.offset(i as u64), Noise::Gaussian, &opts)?;
            if let Some(q) = &q {
                y = y.to_q(q);
            }
            let mut buf = Vec::new();
            y.write_csv(&mut buf)?;
            Ok((PathBuf::from(format!("trials/trial_{i:0width$}.csv")), buf))
        })
        .collect::<Result<_>>()?;
    let mut t = CsvTable::new(["trial", "file", "t", "p"]);
    for (i, (f, _)) in files.iter().enumerate() {
        t.push(vec![i.to_string(), f.display().to_string(), cfg.t.to_string(), params.p().to_string()]);
    }
    Ok(RunOutput {
        results_csv: t.to_bytes()?,
        extra: files,
        meta: serde_json::json!({ "p": params.p(), "r": params.r() }),
    })
}
