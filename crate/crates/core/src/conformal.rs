//! Exact conformal machinery: grids, p-values, regions and baselines.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram, GramMatrix, KernelSpec};
use crate::losses::{score, LossSpec};
use crate::solver::{Predictor, WeightedProblem};

/// Uniform grid of candidate outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YGrid {
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
}

impl YGrid {
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::input(format!("grid bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        if m < 2 {
            return Err(Error::input(format!("grid needs at least 2 points, got {m}")));
        }
        Ok(YGrid { lo, hi, m })
    }

    /// `[min - pad * range, max + pad * range]` over `ys`.
    pub fn covering(ys: &[f64], pad: f64, m: usize) -> Result<Self> {
        let (min, max) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::input("cannot build a grid from empty or non-finite outputs"));
        }
        let range = if max > min { max - min } else { 1.0 };
        Self::new(min - pad * range, max + pad * range, m)
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.m - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.m {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.m).map(|i| self.point(i))
    }

    /// Index of the nearest grid point, or `None` outside `[lo - step/2, hi + step/2]`.
    pub fn nearest(&self, y: f64) -> Option<usize> {
        let pos = ((y - self.lo) / self.step()).round();
        if pos >= 0.0 && pos < self.m as f64 {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Optional per-point diagnostics of an approximate curve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveDiagnostics {
    pub tau_test: Vec<f64>,
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
}

/// Upper and lower p-values over a grid; both coincide for exact methods.
#[derive(Clone, Debug, PartialEq)]
pub struct PValueCurve {
    pub grid: YGrid,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub diagnostics: Option<CurveDiagnostics>,
}

impl PValueCurve {
    pub fn exact(grid: YGrid, p: Vec<f64>) -> Self {
        PValueCurve {
            grid,
            lower: p.clone(),
            upper: p,
            diagnostics: None,
        }
    }

    pub fn upper_region(&self, alpha: f64) -> PredictionRegion {
        PredictionRegion::from_pvalues(self.grid, &self.upper, alpha)
    }

    pub fn lower_region(&self, alpha: f64) -> PredictionRegion {
        PredictionRegion::from_pvalues(self.grid, &self.lower, alpha)
    }
}

/// Boolean mask over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRegion {
    pub grid: YGrid,
    pub mask: Vec<bool>,
}

impl PredictionRegion {
    pub fn new(grid: YGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.m {
            return Err(Error::input(format!("mask has {} cells, grid has {}", mask.len(), grid.m)));
        }
        Ok(PredictionRegion { grid, mask })
    }

    /// `{y : p(y) > alpha}`.
    pub fn from_pvalues(grid: YGrid, p: &[f64], alpha: f64) -> Self {
        PredictionRegion {
            grid,
            mask: p.iter().map(|&v| v > alpha).collect(),
        }
    }

    pub fn full(grid: YGrid) -> Self {
        PredictionRegion {
            grid,
            mask: vec![true; grid.m],
        }
    }

    pub fn empty(grid: YGrid) -> Self {
        PredictionRegion {
            grid,
            mask: vec![false; grid.m],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// `step * count`.
    pub fn measure(&self) -> f64 {
        self.grid.step() * self.count() as f64
    }

    /// Maximal runs of true cells as `[y_a, y_b]` grid-point pairs.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.index_runs()
            .into_iter()
            .map(|(a, b)| (self.grid.point(a), self.grid.point(b)))
            .collect()
    }

    /// Maximal runs of true cells as inclusive index pairs.
    pub fn index_runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &b) in self.mask.iter().enumerate() {
            match (b, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, self.mask.len() - 1));
        }
        runs
    }

    /// Nearest-cell membership; points off the grid are outside.
    pub fn contains(&self, y: f64) -> bool {
        self.grid.nearest(y).is_some_and(|i| self.mask[i])
    }

    /// Whether a boundary cell is in the region, i.e. the grid may clip it.
    pub fn touches_boundary(&self) -> bool {
        self.mask.first() == Some(&true) || self.mask.last() == Some(&true)
    }

    /// Cell-wise inclusion.
    pub fn is_subset_of(&self, other: &PredictionRegion) -> bool {
        self.grid == other.grid && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

/// `(1 + #{i : train_i >= test}) / (n + 1)`.
pub fn conformal_pvalue(train_scores: &[f64], test_score: f64) -> f64 {
    let count = train_scores.iter().filter(|&&s| s >= test_score).count();
    (1 + count) as f64 / (train_scores.len() + 1) as f64
}

/// Labeled sample, query input and model settings.
#[derive(Clone, Debug)]
pub struct RegressionTask {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub x_query: Vec<f64>,
    pub kernel: KernelSpec,
    pub loss: LossSpec,
    pub lambda: f64,
}

impl RegressionTask {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(Error::input(format!(
                "{} input rows but {} outputs",
                self.x.len(),
                self.y.len()
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::input(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.loss.validate()
    }

    /// Inputs followed by the query input.
    pub fn augmented_points(&self) -> Vec<Vec<f64>> {
        let mut pts = self.x.clone();
        pts.push(self.x_query.clone());
        pts
    }

    /// Gram matrix over the augmented sample.
    pub fn gram(&self) -> Result<Arc<GramMatrix>> {
        self.validate()?;
        Ok(Arc::new(gram(&self.kernel, &self.augmented_points())?))
    }

    /// Same settings on a subsample with another query.
    pub fn restricted(&self, idx: &[usize], x_query: Vec<f64>) -> RegressionTask {
        RegressionTask {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x_query,
            ..self.clone()
        }
    }
}

/// Training scores `|Y_i - f_i|` of a fit on the augmented sample.
pub fn training_scores(targets: &[f64], fitted: &DVector<f64>) -> Vec<f64> {
    targets.iter().zip(fitted.iter()).map(|(&y, &f)| score(y, f)).collect()
}

/// Exact full conformal p-values by refitting at every grid point, warm
/// starting each fit from the previous one.
pub fn full_pvalue_curve(task: &RegressionTask, grid: YGrid) -> Result<PValueCurve> {
    let g = task.gram()?;
    let mut prev: Option<Predictor> = None;
    let mut p = Vec::with_capacity(grid.m);
    for (index, y) in grid.points().enumerate() {
        let fit = WeightedProblem::with_candidate(g.clone(), task.y.clone(), y, y, task.lambda, task.loss)
            .and_then(|prob| match &prev {
                Some(warm) => prob.fit_from(&warm.coeffs),
                None => prob.fit(),
            })
            .map_err(|e| Error::GridPoint {
                index,
                y,
                source: Box::new(e),
            })?;
        let train = training_scores(&task.y, &fit.fitted);
        p.push(conformal_pvalue(&train, score(y, fit.query_value())));
        prev = Some(fit);
    }
    Ok(PValueCurve::exact(grid, p))
}

pub fn full_region_bruteforce(task: &RegressionTask, grid: YGrid, alpha: f64) -> Result<PredictionRegion> {
    check_alpha(alpha)?;
    Ok(full_pvalue_curve(task, grid)?.upper_region(alpha))
}

/// Region from a single fit that uses the true query output.
pub fn oracle_region(task: &RegressionTask, y_true: f64, grid: YGrid, alpha: f64) -> Result<PredictionRegion> {
    check_alpha(alpha)?;
    let g = task.gram()?;
    let fit = WeightedProblem::with_anchor(g, task.y.clone(), y_true, task.lambda, task.loss)?.fit()?;
    let train = training_scores(&task.y, &fit.fitted);
    let center = fit.query_value();
    let p: Vec<f64> = grid.points().map(|y| conformal_pvalue(&train, score(y, center))).collect();
    Ok(PredictionRegion::from_pvalues(grid, &p, alpha))
}

/// Baseline region with the data partition it used.
#[derive(Clone, Debug)]
pub struct BaselineRegion {
    pub region: PredictionRegion,
    /// Split: `[train, calibration]`. Cross: one entry per fold.
    pub partition: Vec<Vec<usize>>,
}

/// A regularized fit on a subsample, able to predict anywhere.
struct SubsampleFit {
    points: Vec<Vec<f64>>,
    predictor: Predictor,
    kernel: KernelSpec,
}

impl SubsampleFit {
    fn new(task: &RegressionTask, idx: &[usize]) -> Result<Self> {
        let points: Vec<Vec<f64>> = idx.iter().map(|&i| task.x[i].clone()).collect();
        let targets: Vec<f64> = idx.iter().map(|&i| task.y[i]).collect();
        let g = Arc::new(gram(&task.kernel, &points)?);
        let predictor = WeightedProblem::on_sample(g, &targets, task.lambda, task.loss)?.fit()?;
        Ok(SubsampleFit {
            points,
            predictor,
            kernel: task.kernel,
        })
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        let row = crate::kernels::kernel_row(&self.kernel, &self.points, x)?;
        self.predictor.predict(&row)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Split conformal region: fit on a random `split_fraction` of the sample,
/// calibrate on the rest.
pub fn split_region(
    task: &RegressionTask,
    grid: YGrid,
    alpha: f64,
    split_fraction: f64,
    seed: u64,
) -> Result<BaselineRegion> {
    check_alpha(alpha)?;
    task.validate()?;
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::input(format!("split fraction must lie in (0, 1), got {split_fraction}")));
    }
    let n = task.n();
    let n_train = ((n as f64 * split_fraction).round() as usize).clamp(1, n);
    if n_train == n {
        return Err(Error::input(format!(
            "split fraction {split_fraction} leaves no calibration points out of {n}"
        )));
    }
    let idx = shuffled_indices(n, seed);
    let (train, cal) = idx.split_at(n_train);
    let fit = SubsampleFit::new(task, train)?;
    let cal_scores = cal
        .iter()
        .map(|&i| Ok(score(task.y[i], fit.predict(&task.x[i])?)))
        .collect::<Result<Vec<f64>>>()?;
    let center = fit.predict(&task.x_query)?;
    let p: Vec<f64> = grid.points().map(|y| conformal_pvalue(&cal_scores, score(y, center))).collect();
    Ok(BaselineRegion {
        region: PredictionRegion::from_pvalues(grid, &p, alpha),
        partition: vec![train.to_vec(), cal.to_vec()],
    })
}

/// Held-out scores of one cross-conformal fold and its query prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldScores {
    pub query_prediction: f64,
    pub scores: Vec<f64>,
}

/// `(1 + sum_v sum_{i in fold v} 1{R_i >= |y - mu_v(x_query)|}) / (n + 1)`.
pub fn cross_pvalue(folds: &[FoldScores], y: f64) -> f64 {
    let n: usize = folds.iter().map(|f| f.scores.len()).sum();
    let count: usize = folds
        .iter()
        .map(|f| {
            let t = score(y, f.query_prediction);
            f.scores.iter().filter(|&&s| s >= t).count()
        })
        .sum();
    (1 + count) as f64 / (n + 1) as f64
}

/// Cross-conformal region over a given partition of the sample.
pub fn cross_region_with_folds(
    task: &RegressionTask,
    grid: YGrid,
    alpha: f64,
    folds: &[Vec<usize>],
) -> Result<PredictionRegion> {
    check_alpha(alpha)?;
    task.validate()?;
    let n = task.n();
    let mut fold_scores = Vec::with_capacity(folds.len());
    for fold in folds {
        let mut held = vec![false; n];
        for &i in fold {
            held[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !held[i]).collect();
        let fit = SubsampleFit::new(task, &train)?;
        let scores = fold
            .iter()
            .map(|&i| Ok(score(task.y[i], fit.predict(&task.x[i])?)))
            .collect::<Result<Vec<f64>>>()?;
        fold_scores.push(FoldScores {
            query_prediction: fit.predict(&task.x_query)?,
            scores,
        });
    }
    let p: Vec<f64> = grid.points().map(|y| cross_pvalue(&fold_scores, y)).collect();
    Ok(PredictionRegion::from_pvalues(grid, &p, alpha))
}

/// Cross-conformal region with `v` random folds of near-equal size.
pub fn cross_region(task: &RegressionTask, grid: YGrid, alpha: f64, v: usize, seed: u64) -> Result<BaselineRegion> {
    let n = task.n();
    if v < 2 || v > n {
        return Err(Error::input(format!("number of folds must lie in [2, {n}], got {v}")));
    }
    let idx = shuffled_indices(n, seed);
    let folds: Vec<Vec<usize>> = (0..v).map(|k| idx.iter().skip(k).step_by(v).copied().collect()).collect();
    let region = cross_region_with_folds(task, grid, alpha, &folds)?;
    Ok(BaselineRegion {
        region,
        partition: folds,
    })
}

/// Monte Carlo coverage with a normal-approximation binomial interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CoverageEstimate {
    pub reps: usize,
    pub hits: usize,
    pub coverage: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl CoverageEstimate {
    pub fn from_hits(hits: usize, reps: usize) -> Self {
        let coverage = hits as f64 / reps.max(1) as f64;
        let std_err = (coverage * (1.0 - coverage) / reps.max(1) as f64).sqrt();
        CoverageEstimate {
            reps,
            hits,
            coverage,
            std_err,
            ci_low: (coverage - 1.96 * std_err).max(0.0),
            ci_high: (coverage + 1.96 * std_err).min(1.0),
        }
    }
}

/// Fraction of repetitions whose region contains the true output. `build`
/// receives the repetition index and its derived seed and returns the region
/// with the true output.
pub fn empirical_coverage<F>(reps: usize, seed: u64, mut build: F) -> Result<CoverageEstimate>
where
    F: FnMut(usize, u64) -> Result<(PredictionRegion, f64)>,
{
    if reps == 0 {
        return Err(Error::input("coverage needs at least one repetition"));
    }
    let mut hits = 0;
    for rep in 0..reps {
        let (region, y_true) = build(rep, crate::data::derive_seed(seed, rep as u64))?;
        if region.contains(y_true) {
            hits += 1;
        }
    }
    Ok(CoverageEstimate::from_hits(hits, reps))
}
