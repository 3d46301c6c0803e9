//! Experiment harness: rate sweeps, method comparison, single regions,
//! regularization selection and data generation, configured from JSON.
//!
//! Every command is a pure function of its configuration and seed. Per-item
//! randomness is drawn from seeds derived from `(seed, index)`, so results do
//! not depend on evaluation order.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{refined_measure, thickness_bound, ApproxConformal, ApproxKind, ApproxMethod, BoundBranch};
use crate::conformal::{
    cross_region, full_pvalue_curve, oracle_region, split_region, PValueCurve, PredictionRegion, RegressionTask,
    YGrid,
};
use crate::data::{derive_seed, friedman1, load_csv, Dataset, RNG_NAME};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::losses::LossSpec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `lambda` as a function of the augmented sample size `N = n + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaRule {
    Fixed { lambda: f64 },
    /// `c * N^(-r)`
    Power { c: f64, r: f64 },
}

impl Default for LambdaRule {
    /// `lambda(129) = 0.5` with `r = 0.33`.
    fn default() -> Self {
        LambdaRule::Power {
            c: 0.5 * 129f64.powf(0.33),
            r: 0.33,
        }
    }
}

impl LambdaRule {
    pub fn lambda(&self, n_aug: usize) -> f64 {
        match *self {
            LambdaRule::Fixed { lambda } => lambda,
            LambdaRule::Power { c, r } => c * (n_aug as f64).powf(-r),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LambdaRule::Fixed { lambda } if lambda > 0.0 && lambda.is_finite() => Ok(()),
            LambdaRule::Power { c, r } if c > 0.0 && c.is_finite() && (0.0..1.0).contains(&r) => Ok(()),
            other => Err(Error::input(format!("invalid lambda rule {other:?}"))),
        }
    }
}

/// Region construction methods known to the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodName {
    #[serde(rename = "SplitCP")]
    Split,
    #[serde(rename = "CrossCP")]
    Cross,
    #[serde(rename = "FullCP")]
    Full,
    #[serde(rename = "UStableCP")]
    UStable,
    #[serde(rename = "LocStableCP")]
    LocStable,
    #[serde(rename = "InfluenceFunctionCP")]
    InfluenceFunction,
    #[serde(rename = "OracleCP")]
    Oracle,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Split => "SplitCP",
            MethodName::Cross => "CrossCP",
            MethodName::Full => "FullCP",
            MethodName::UStable => "UStableCP",
            MethodName::LocStable => "LocStableCP",
            MethodName::InfluenceFunction => "InfluenceFunctionCP",
            MethodName::Oracle => "OracleCP",
        }
    }

    pub fn approx_kind(self) -> Option<ApproxKind> {
        match self {
            MethodName::UStable => Some(ApproxKind::UniformStability),
            MethodName::LocStable => Some(ApproxKind::LocalStability),
            MethodName::InfluenceFunction => Some(ApproxKind::InfluenceFunction),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Padding as a fraction of the output range on each side.
    pub pad: f64,
    pub m: usize,
    /// Explicit bounds override the padding rule.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            pad: 0.5,
            m: 512,
            lo: None,
            hi: None,
        }
    }
}

impl GridConfig {
    pub fn grid_for(&self, ys: &[f64]) -> Result<YGrid> {
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => YGrid::new(lo, hi, self.m),
            (None, None) => YGrid::covering(ys, self.pad, self.m),
            _ => Err(Error::input("grid.lo and grid.hi must be given together")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel: KernelSpec,
    pub loss: LossSpec,
    pub methods: Vec<MethodName>,
    pub alpha: f64,
    pub grid: GridConfig,
    pub lambda: LambdaRule,
    /// Sample sizes for sweeps; defaults to the full or desk schedule.
    pub n_schedule: Option<Vec<usize>>,
    pub repetitions: usize,
    pub seed: u64,
    pub z_anchor: f64,
    pub out_dir: Option<PathBuf>,
    /// Rows drawn for compare, region, select-lambda and gen-data (the last row is the query).
    pub n: usize,
    pub noise_sd: f64,
    pub split_fraction: f64,
    pub folds: usize,
    /// Candidate regularization values for select-lambda.
    pub lambda_grid: Vec<f64>,
    /// Method whose upper-region measure drives select-lambda.
    pub selection_method: MethodName,
    /// CSV input instead of synthetic data.
    pub data: Option<PathBuf>,
    /// Query input; defaults to the last data row.
    pub query: Option<Vec<f64>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kernel: KernelSpec::default(),
            loss: LossSpec::default(),
            methods: vec![
                MethodName::Split,
                MethodName::UStable,
                MethodName::LocStable,
                MethodName::InfluenceFunction,
                MethodName::Oracle,
            ],
            alpha: 0.1,
            grid: GridConfig::default(),
            lambda: LambdaRule::default(),
            n_schedule: None,
            repetitions: 50,
            seed: 0,
            z_anchor: 0.0,
            out_dir: None,
            n: 200,
            noise_sd: 0.0,
            split_fraction: 0.5,
            folds: 5,
            lambda_grid: vec![0.01, 0.03, 0.1, 0.3, 1.0],
            selection_method: MethodName::InfluenceFunction,
            data: None,
            query: None,
        }
    }
}

/// `k` integers log-spaced over `[lo, hi]`, deduplicated.
pub fn log_spaced(lo: usize, hi: usize, k: usize) -> Vec<usize> {
    if k <= 1 || lo >= hi {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<usize> = (0..k)
        .map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp().round() as usize)
        .collect();
    out.dedup();
    out
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::input(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.repetitions == 0 {
            return Err(Error::input("repetitions must be >= 1"));
        }
        if !self.z_anchor.is_finite() {
            return Err(Error::input("z_anchor must be finite"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::input("noise_sd must be >= 0"));
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::input("lambda_grid values must be positive"));
        }
        self.lambda.validate()?;
        self.loss.validate()?;
        self.kernel.resolve(1)?;
        Ok(())
    }

    /// Sweep sample sizes: explicit, desk (8 in [32, 256]) or full (15 in [128, 1024]).
    pub fn schedule(&self, desk: bool) -> Vec<usize> {
        match &self.n_schedule {
            Some(s) => s.clone(),
            None if desk => log_spaced(32, 256, 8),
            None => log_spaced(128, 1024, 15),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn approx_method(&self, kind: ApproxKind) -> ApproxMethod {
        ApproxMethod {
            kind,
            z_anchor: self.z_anchor,
        }
    }
}

/// Run metadata written next to every output.
#[derive(Clone, Debug, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub rng: &'static str,
    pub lambda_rule: LambdaRule,
    pub config: ExperimentConfig,
}

impl RunMeta {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        RunMeta {
            command: command.to_string(),
            version: VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            rng: RNG_NAME,
            lambda_rule: config.lambda,
            config: config.clone(),
        }
    }
}

/// Ordinary least-squares slope of `ln y` against `ln x`, skipping non-positive values.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Synthetic draw of `rows` points split into a task and the query's true output.
fn synthetic_task(config: &ExperimentConfig, rows: usize, seed: u64) -> Result<(RegressionTask, f64)> {
    let ds = friedman1(rows, config.noise_sd, seed)?;
    let lambda = config.lambda.lambda(rows);
    ds.into_task(config.kernel, config.loss, lambda)
}

fn warn_if_clipped(region: &PredictionRegion, what: &str) {
    if region.touches_boundary() {
        log::warn!("{what}: region reaches the grid boundary and may be clipped; widen the grid");
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub method: &'static str,
    pub n: usize,
    pub rep: usize,
    pub lambda: f64,
    /// Refined measure of upper minus lower region.
    pub delta: f64,
    /// Cell-count thickness gap on the grid.
    pub delta_grid: f64,
    pub bound: f64,
    pub branch: BoundBranch,
    pub seconds: f64,
    pub status: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub method: &'static str,
    pub n: usize,
    pub lambda: f64,
    pub mean_delta: f64,
    pub mean_bound: f64,
    /// Smallest `bound - delta` over repetitions.
    pub min_margin: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeRow {
    pub method: &'static str,
    pub quantity: &'static str,
    pub slope: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    pub slopes: Vec<SlopeRow>,
}

fn sweep_kinds(config: &ExperimentConfig) -> Vec<ApproxKind> {
    let kinds: Vec<ApproxKind> = config.methods.iter().filter_map(|m| m.approx_kind()).collect();
    if kinds.is_empty() {
        ApproxKind::ALL.to_vec()
    } else {
        kinds
    }
}

/// Thickness gap and theoretical bound per method, sample size and repetition.
pub fn sweep(config: &ExperimentConfig, desk: bool) -> Result<SweepReport> {
    config.validate()?;
    let schedule = config.schedule(desk);
    if schedule.len() < 4 {
        return Err(Error::input("a sweep needs at least 4 sample sizes"));
    }
    let kinds = sweep_kinds(config);
    let mut rows = Vec::new();
    for &n in &schedule {
        for rep in 0..config.repetitions {
            let seed = derive_seed(derive_seed(config.seed, n as u64), rep as u64);
            let lambda = config.lambda.lambda(n + 1);
            let prepared = synthetic_task(config, n + 1, seed).and_then(|(task, _)| {
                let grid = config.grid.grid_for(&task.y)?;
                let base = ApproxConformal::new(&task, config.approx_method(kinds[0]))?;
                Ok((grid, base))
            });
            let (grid, base) = match prepared {
                Ok(x) => x,
                Err(e) => {
                    for &kind in &kinds {
                        rows.push(failed_row(kind, n, rep, lambda, &e));
                    }
                    continue;
                }
            };
            for &kind in &kinds {
                let start = Instant::now();
                let row = base.with_kind(kind).and_then(|a| {
                    let (upper, lower) = a.regions(grid, config.alpha);
                    warn_if_clipped(&upper, kind.display_name());
                    let delta_grid = crate::approx::thickness_gap(&upper, &lower)?;
                    let (mu, ml) = a.refined_measures(grid, config.alpha);
                    let sup = if kind == ApproxKind::InfluenceFunction {
                        a.tau_sup(grid)
                    } else {
                        0.0
                    };
                    let bound = thickness_bound(kind, a.gram(), a.constants(), lambda, sup)?;
                    Ok(SweepRow {
                        method: kind.display_name(),
                        n,
                        rep,
                        lambda,
                        delta: (mu - ml).max(0.0),
                        delta_grid,
                        bound: bound.value,
                        branch: bound.branch,
                        seconds: start.elapsed().as_secs_f64(),
                        status: "ok".into(),
                    })
                });
                rows.push(row.unwrap_or_else(|e| failed_row(kind, n, rep, lambda, &e)));
            }
        }
    }
    let mut summary = Vec::new();
    let mut slopes = Vec::new();
    for &kind in &kinds {
        let name = kind.display_name();
        let mut ns = Vec::new();
        let mut deltas = Vec::new();
        let mut bounds = Vec::new();
        for &n in &schedule {
            let ok: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.method == name && r.n == n && r.status == "ok")
                .collect();
            let failures = config.repetitions - ok.len();
            if ok.is_empty() {
                continue;
            }
            let k = ok.len() as f64;
            let s = SweepSummary {
                method: name,
                n,
                lambda: ok[0].lambda,
                mean_delta: ok.iter().map(|r| r.delta).sum::<f64>() / k,
                mean_bound: ok.iter().map(|r| r.bound).sum::<f64>() / k,
                min_margin: ok.iter().map(|r| r.bound - r.delta).fold(f64::INFINITY, f64::min),
                failures,
            };
            ns.push(n as f64);
            deltas.push(s.mean_delta);
            bounds.push(s.mean_bound);
            summary.push(s);
        }
        slopes.push(SlopeRow {
            method: name,
            quantity: "delta",
            slope: loglog_slope(&ns, &deltas),
        });
        slopes.push(SlopeRow {
            method: name,
            quantity: "bound",
            slope: loglog_slope(&ns, &bounds),
        });
    }
    Ok(SweepReport { rows, summary, slopes })
}

fn failed_row(kind: ApproxKind, n: usize, rep: usize, lambda: f64, e: &Error) -> SweepRow {
    log::warn!("{} failed at n = {n}, rep = {rep}: {e}", kind.display_name());
    SweepRow {
        method: kind.display_name(),
        n,
        rep,
        lambda,
        delta: f64::NAN,
        delta_grid: f64::NAN,
        bound: f64::NAN,
        branch: BoundBranch::Uniform,
        seconds: 0.0,
        status: format!("failed: {e}"),
    }
}

// ---------------------------------------------------------------- regions

/// Region of one method on one task, with its p-value curve when available.
#[derive(Clone, Debug)]
pub struct MethodRegion {
    pub method: MethodName,
    pub region: PredictionRegion,
    pub curve: Option<PValueCurve>,
}

/// Builds the region of `method`; `y_true` is required by the oracle.
pub fn build_region(
    config: &ExperimentConfig,
    method: MethodName,
    task: &RegressionTask,
    grid: YGrid,
    y_true: Option<f64>,
    seed: u64,
) -> Result<MethodRegion> {
    let alpha = config.alpha;
    let (region, curve) = match method {
        MethodName::Split => (split_region(task, grid, alpha, config.split_fraction, seed)?.region, None),
        MethodName::Cross => (cross_region(task, grid, alpha, config.folds, seed)?.region, None),
        MethodName::Full => {
            let c = full_pvalue_curve(task, grid)?;
            (c.upper_region(alpha), Some(c))
        }
        MethodName::Oracle => {
            let y = y_true.ok_or_else(|| Error::input("OracleCP needs the true query output"))?;
            (oracle_region(task, y, grid, alpha)?, None)
        }
        MethodName::UStable | MethodName::LocStable | MethodName::InfluenceFunction => {
            let kind = method.approx_kind().unwrap_or(ApproxKind::UniformStability);
            let c = ApproxConformal::new(task, config.approx_method(kind))?.curve(grid);
            (c.upper_region(alpha), Some(c))
        }
    };
    Ok(MethodRegion { method, region, curve })
}

// ---------------------------------------------------------------- compare

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub method: &'static str,
    pub rep: usize,
    pub length: f64,
    pub covered: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareSummary {
    pub method: &'static str,
    pub mean_length: f64,
    pub coverage: f64,
    pub coverage_std_err: f64,
    pub relative_time: f64,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub summary: Vec<CompareSummary>,
}

/// Region length, coverage and timing of each configured method over repetitions.
pub fn compare(config: &ExperimentConfig) -> Result<CompareReport> {
    config.validate()?;
    if config.n < 3 {
        return Err(Error::input("compare needs n >= 3"));
    }
    let mut rows = Vec::new();
    let mut failures = vec![0usize; config.methods.len()];
    for rep in 0..config.repetitions {
        let seed = derive_seed(config.seed, rep as u64);
        let (task, y_true) = synthetic_task(config, config.n, seed)?;
        let grid = config.grid.grid_for(&task.y)?;
        for (mi, &method) in config.methods.iter().enumerate() {
            let start = Instant::now();
            match build_region(config, method, &task, grid, Some(y_true), seed) {
                Ok(r) => {
                    let seconds = start.elapsed().as_secs_f64();
                    warn_if_clipped(&r.region, method.as_str());
                    rows.push(CompareRow {
                        method: method.as_str(),
                        rep,
                        length: r.region.measure(),
                        covered: r.region.contains(y_true),
                        seconds,
                    });
                }
                Err(e) => {
                    log::warn!("{} failed at rep {rep}: {e}", method.as_str());
                    failures[mi] += 1;
                }
            }
        }
    }
    let mean_time = |name: &str| {
        let t: Vec<f64> = rows.iter().filter(|r| r.method == name).map(|r| r.seconds).collect();
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    };
    let oracle_time = mean_time(MethodName::Oracle.as_str());
    let summary = config
        .methods
        .iter()
        .zip(&failures)
        .map(|(&m, &f)| {
            let name = m.as_str();
            let mine: Vec<&CompareRow> = rows.iter().filter(|r| r.method == name).collect();
            let k = mine.len().max(1) as f64;
            let coverage = mine.iter().filter(|r| r.covered).count() as f64 / k;
            let relative_time = match (m, oracle_time, mean_time(name)) {
                (MethodName::Oracle, Some(_), _) => 1.0,
                (_, Some(o), Some(t)) if o > 0.0 => t / o,
                _ => f64::NAN,
            };
            CompareSummary {
                method: name,
                mean_length: mine.iter().map(|r| r.length).sum::<f64>() / k,
                coverage,
                coverage_std_err: (coverage * (1.0 - coverage) / k).sqrt(),
                relative_time,
                failures: f,
            }
        })
        .collect();
    Ok(CompareReport { rows, summary })
}

// ---------------------------------------------------------------- region

/// Loads the configured dataset or draws a synthetic one.
pub fn dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.data {
        Some(path) => load_csv(path),
        None => friedman1(config.n, config.noise_sd, config.seed),
    }
}

/// Task from a dataset: the configured query, or the last row split off
/// (whose output is then returned as the truth).
pub fn task_from(config: &ExperimentConfig, ds: Dataset, lambda: Option<f64>) -> Result<(RegressionTask, Option<f64>)> {
    match &config.query {
        Some(q) => {
            if q.len() != ds.dim() {
                return Err(Error::input(format!("query has dimension {}, data has {}", q.len(), ds.dim())));
            }
            let n_aug = ds.len() + 1;
            let task = RegressionTask {
                x: ds.x,
                y: ds.y,
                x_query: q.clone(),
                kernel: config.kernel,
                loss: config.loss,
                lambda: lambda.unwrap_or_else(|| config.lambda.lambda(n_aug)),
            };
            task.validate()?;
            Ok((task, None))
        }
        None => {
            let n_aug = ds.len();
            let (task, y) = ds.into_task(config.kernel, config.loss, lambda.unwrap_or_else(|| config.lambda.lambda(n_aug)))?;
            Ok((task, Some(y)))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegionSummary {
    pub method: &'static str,
    pub alpha: f64,
    pub lambda: f64,
    pub intervals: Vec<(f64, f64)>,
    pub measure: f64,
    pub clipped: bool,
    pub grid: YGrid,
    pub y_true: Option<f64>,
    pub config_hash: String,
    pub version: &'static str,
}

#[derive(Clone, Debug)]
pub struct RegionReport {
    pub regions: Vec<MethodRegion>,
    pub summaries: Vec<RegionSummary>,
}

/// Regions of the configured methods on the configured data.
pub fn region(config: &ExperimentConfig) -> Result<RegionReport> {
    config.validate()?;
    let (task, y_true) = task_from(config, dataset(config)?, None)?;
    region_for_task(config, &task, y_true)
}

pub fn region_for_task(config: &ExperimentConfig, task: &RegressionTask, y_true: Option<f64>) -> Result<RegionReport> {
    let grid = config.grid.grid_for(&task.y)?;
    let mut regions = Vec::new();
    let mut summaries = Vec::new();
    for &m in &config.methods {
        if m == MethodName::Oracle && y_true.is_none() {
            log::warn!("skipping OracleCP: the query output is unknown");
            continue;
        }
        let r = build_region(config, m, task, grid, y_true, config.seed)?;
        warn_if_clipped(&r.region, m.as_str());
        summaries.push(RegionSummary {
            method: m.as_str(),
            alpha: config.alpha,
            lambda: task.lambda,
            intervals: r.region.intervals(),
            measure: r.region.measure(),
            clipped: r.region.touches_boundary(),
            grid,
            y_true,
            config_hash: config.hash(),
            version: VERSION,
        });
        regions.push(r);
    }
    Ok(RegionReport { regions, summaries })
}

// ---------------------------------------------------------------- select-lambda

/// `argmin` of `measure` over `lambdas`, ties broken towards the largest value.
/// Returns the choice and all measures in input order.
pub fn select_lambda_with<F>(lambdas: &[f64], mut measure: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if lambdas.is_empty() {
        return Err(Error::input("the lambda grid is empty"));
    }
    let measures = lambdas.iter().map(|&l| measure(l)).collect::<Result<Vec<f64>>>()?;
    let best = measures.iter().cloned().fold(f64::INFINITY, f64::min);
    let chosen = lambdas
        .iter()
        .zip(&measures)
        .filter(|(_, &m)| m <= best)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((chosen, measures))
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectionRow {
    pub lambda: f64,
    pub mean_loo_measure: f64,
    pub full_grid_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
    pub chosen: f64,
    pub final_region: RegionReport,
}

/// Chooses `lambda` on one half of the data by the average leave-one-out
/// upper-region measure, then builds the region on the other half.
pub fn select_lambda(config: &ExperimentConfig) -> Result<SelectionReport> {
    config.validate()?;
    let method = config.selection_method;
    if method == MethodName::Oracle {
        return Err(Error::input("OracleCP cannot drive lambda selection"));
    }
    let (task, y_true) = task_from(config, dataset(config)?, None)?;
    let n = task.n();
    if n < 4 {
        return Err(Error::input("select-lambda needs at least 4 labeled rows"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX)));
    }
    let (d1, d2) = idx.split_at(n / 2);
    let grid = config.grid.grid_for(&task.y)?;
    let mut full_fraction = Vec::new();
    let (chosen, measures) = select_lambda_with(&config.lambda_grid, |lambda| {
        let mut total = 0.0;
        let mut full = 0usize;
        for (j, &held) in d1.iter().enumerate() {
            let rest: Vec<usize> = d1.iter().copied().filter(|&i| i != held).collect();
            let mut loo = task.restricted(&rest, task.x[held].clone());
            loo.lambda = lambda;
            let r = build_region(config, method, &loo, grid, None, derive_seed(config.seed, j as u64))?;
            if r.region.count() == grid.m {
                full += 1;
            }
            total += r.region.measure();
        }
        full_fraction.push(full as f64 / d1.len() as f64);
        Ok(total / d1.len() as f64)
    })?;
    if full_fraction.iter().all(|&f| f == 1.0) {
        log::warn!("every leave-one-out region covers the whole grid; lambda chosen by the tie rule");
    }
    let rows = config
        .lambda_grid
        .iter()
        .zip(&measures)
        .zip(&full_fraction)
        .map(|((&lambda, &m), &f)| SelectionRow {
            lambda,
            mean_loo_measure: m,
            full_grid_fraction: f,
        })
        .collect();
    let mut final_task = task.restricted(d2, task.x_query.clone());
    final_task.lambda = chosen;
    let final_cfg = ExperimentConfig {
        methods: vec![method],
        ..config.clone()
    };
    let final_region = region_for_task(&final_cfg, &final_task, y_true)?;
    Ok(SelectionReport {
        rows,
        chosen,
        final_region,
    })
}

// ---------------------------------------------------------------- output

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::data::csv_io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::data::csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct CurveRow {
    y: f64,
    upper_p: f64,
    lower_p: f64,
    in_region: bool,
    tau_test: Option<f64>,
    rho1: Option<f64>,
    rho2: Option<f64>,
}

/// Curve CSV `(y, upper_p, lower_p, in_region[, tau_test, rho1, rho2])`.
pub fn write_curve(path: &Path, r: &MethodRegion) -> Result<()> {
    let grid = r.region.grid;
    let rows: Vec<CurveRow> = (0..grid.m)
        .map(|i| {
            let (u, l) = r.curve.as_ref().map_or((f64::NAN, f64::NAN), |c| (c.upper[i], c.lower[i]));
            let d = r.curve.as_ref().and_then(|c| c.diagnostics.as_ref());
            let pick = |v: Option<&Vec<f64>>| v.map(|v| v[i]).filter(|x| x.is_finite());
            CurveRow {
                y: grid.point(i),
                upper_p: u,
                lower_p: l,
                in_region: r.region.mask[i],
                tau_test: pick(d.map(|d| &d.tau_test)),
                rho1: pick(d.map(|d| &d.rho1)),
                rho2: pick(d.map(|d| &d.rho2)),
            }
        })
        .collect();
    write_csv(path, &rows)
}

impl SweepReport {
    pub fn write(&self, dir: &Path, meta: &RunMeta) -> Result<()> {
        ensure_dir(dir)?;
        write_csv(&dir.join("sweep_rows.csv"), &self.rows)?;
        write_csv(&dir.join("sweep_summary.csv"), &self.summary)?;
        write_csv(&dir.join("sweep_slopes.csv"), &self.slopes)?;
        write_json(&dir.join("run.json"), meta)
    }
}

impl CompareReport {
    pub fn write(&self, dir: &Path, meta: &RunMeta) -> Result<()> {
        ensure_dir(dir)?;
        write_csv(&dir.join("compare_rows.csv"), &self.rows)?;
        write_csv(&dir.join("compare_summary.csv"), &self.summary)?;
        write_json(&dir.join("run.json"), meta)
    }
}

impl RegionReport {
    pub fn write(&self, dir: &Path, meta: &RunMeta) -> Result<()> {
        ensure_dir(dir)?;
        for (r, s) in self.regions.iter().zip(&self.summaries) {
            write_curve(&dir.join(format!("curve_{}.csv", s.method)), r)?;
            write_json(&dir.join(format!("region_{}.json", s.method)), s)?;
        }
        write_json(&dir.join("run.json"), meta)
    }
}

impl SelectionReport {
    pub fn write(&self, dir: &Path, meta: &RunMeta) -> Result<()> {
        ensure_dir(dir)?;
        write_csv(&dir.join("lambda_selection.csv"), &self.rows)?;
        write_json(&dir.join("lambda_choice.json"), &serde_json::json!({ "lambda": self.chosen }))?;
        self.final_region.write(dir, meta)
    }
}

/// Writes a synthetic friedman1 dataset as CSV.
pub fn gen_data(config: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    ensure_dir(dir)?;
    let ds = friedman1(config.n, config.noise_sd, config.seed)?;
    let path = dir.join("data.csv");
    crate::data::save_csv(&path, &ds)?;
    write_json(&dir.join("run.json"), &RunMeta::new("gen-data", config))?;
    Ok(path)
}

/// Measure of the upper region with exact boundaries, for one method.
pub fn refined_upper_measure(a: &ApproxConformal, grid: YGrid, alpha: f64) -> f64 {
    refined_measure(grid, |y| a.pvalues(y).0 > alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lambda_rule_default() {
        let r = LambdaRule::default();
        assert_relative_eq!(r.lambda(129), 0.5, epsilon = 1e-12);
        assert_relative_eq!(r.lambda(258) / r.lambda(129), 2f64.powf(-0.33), epsilon = 1e-12);
        assert_eq!(LambdaRule::Fixed { lambda: 0.2 }.lambda(7), 0.2);
    }

    #[test]
    fn schedules() {
        let cfg = ExperimentConfig::default();
        let full = cfg.schedule(false);
        assert_eq!(full.len(), 15);
        assert_eq!((full[0], full[14]), (128, 1024));
        let desk = cfg.schedule(true);
        assert_eq!(desk.len(), 8);
        assert_eq!((desk[0], desk[7]), (32, 256));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.hash(), ExperimentConfig::from_json(&text).unwrap().hash());

        let partial = ExperimentConfig::from_json(
            r#"{"alpha":0.2,"loss":{"family":"pseudo_huber","a":2.0},"lambda":{"kind":"fixed","lambda":0.3},
                "methods":["UStableCP","OracleCP"]}"#,
        )
        .unwrap();
        assert_eq!(partial.alpha, 0.2);
        assert_eq!(partial.methods, vec![MethodName::UStable, MethodName::Oracle]);
        assert!(ExperimentConfig::from_json(r#"{"alpha":1.5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"repetitions":0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"lambda":{"kind":"power","c":1.0,"r":1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn slope_of_a_power_law() {
        let xs: Vec<f64> = (1..10).map(|i| i as f64 * 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.7)).collect();
        assert_relative_eq!(loglog_slope(&xs, &ys).unwrap(), -0.7, epsilon = 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn selection_rules() {
        let (l, _) = select_lambda_with(&[0.3], |_| Ok(5.0)).unwrap();
        assert_eq!(l, 0.3);
        let (l, _) = select_lambda_with(&[0.1, 0.5, 0.2], |x| Ok(if x > 0.15 { 1.0 } else { 2.0 })).unwrap();
        assert_eq!(l, 0.5);
        // Measures increasing in lambda select the smallest value.
        let (l, m) = select_lambda_with(&[0.4, 0.1, 0.9], |x| Ok(1.0 + x * x)).unwrap();
        assert_eq!(l, 0.1);
        assert!(m[2] > m[0] && m[0] > m[1]);
        assert!(select_lambda_with(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn small_sweep_runs() {
        let cfg = ExperimentConfig {
            n_schedule: Some(vec![12, 16, 20, 24]),
            repetitions: 1,
            grid: GridConfig {
                m: 64,
                ..GridConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let rep = sweep(&cfg, true).unwrap();
        assert_eq!(rep.rows.len(), 12);
        assert!(rep.rows.iter().all(|r| r.status == "ok"));
        assert!(rep.rows.iter().all(|r| r.bound >= r.delta * (1.0 - 1e-9)));
        assert_eq!(rep.slopes.len(), 6);
        let short = ExperimentConfig {
            n_schedule: Some(vec![10, 20]),
            ..cfg
        };
        assert!(sweep(&short, true).is_err());
    }

    #[test]
    fn small_compare_runs() {
        let cfg = ExperimentConfig {
            n: 25,
            repetitions: 2,
            grid: GridConfig {
                m: 64,
                ..GridConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let rep = compare(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 10);
        let oracle = rep.summary.iter().find(|s| s.method == "OracleCP").unwrap();
        assert_eq!(oracle.relative_time, 1.0);
    }

    #[test]
    fn region_report_is_deterministic() {
        let cfg = ExperimentConfig {
            n: 21,
            methods: vec![MethodName::Full, MethodName::InfluenceFunction, MethodName::Cross],
            grid: GridConfig {
                m: 41,
                ..GridConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let a = region(&cfg).unwrap();
        let b = region(&cfg).unwrap();
        for (x, y) in a.regions.iter().zip(&b.regions) {
            assert_eq!(x.region, y.region);
        }
        let upper_if = &a.regions[1].region;
        assert!(a.regions[0].region.is_subset_of(upper_if));
    }

    #[test]
    fn high_alpha_region_is_a_narrow_band() {
        let cfg = ExperimentConfig {
            n: 21,
            alpha: 0.999,
            methods: vec![MethodName::Full],
            grid: GridConfig {
                m: 101,
                ..GridConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let rep = region(&cfg).unwrap();
        // Only points where the test score is below every training score keep p = 1.
        let curve = rep.regions[0].curve.as_ref().unwrap();
        for (i, &p) in curve.upper.iter().enumerate() {
            assert_eq!(rep.regions[0].region.mask[i], p == 1.0);
        }
    }
}
