//! Approximate full conformal regions from a single fit.
//!
//! One predictor is fitted with the query output fixed at an anchor `z`. For
//! every candidate `y` the exact refit scores are replaced by scores of an
//! approximate predictor together with per-point envelopes `tau_i(y)` that are
//! guaranteed to contain the exact scores. Counting with `+tau` and `-tau`
//! gives upper and lower p-values that sandwich the full conformal p-value.
//!
//! | kind                | predictor                          | envelope |
//! |---------------------|------------------------------------|----------|
//! | uniform stability   | fit at `z`                         | `tau0`   |
//! | local stability     | fit at `z`                         | `tau1(y)`|
//! | influence function  | fit at `z` plus a first-order step | `tau2(y)`|

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conformal::{PValueCurve, PredictionRegion, RegressionTask, YGrid, CurveDiagnostics};
use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::losses::{score, LossSpec, SmoothnessConstants};
use crate::solver::{Predictor, WeightedProblem};

/// Bisection steps used to locate region boundaries between grid points.
pub const BISECTION_STEPS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxKind {
    UniformStability,
    LocalStability,
    InfluenceFunction,
}

impl ApproxKind {
    pub const ALL: [ApproxKind; 3] = [
        ApproxKind::UniformStability,
        ApproxKind::LocalStability,
        ApproxKind::InfluenceFunction,
    ];

    /// Order of the approximation: 0, 1 or 2.
    pub fn order(self) -> u8 {
        match self {
            ApproxKind::UniformStability => 0,
            ApproxKind::LocalStability => 1,
            ApproxKind::InfluenceFunction => 2,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ApproxKind::UniformStability => "UStableCP",
            ApproxKind::LocalStability => "LocStableCP",
            ApproxKind::InfluenceFunction => "InfluenceFunctionCP",
        }
    }
}

impl fmt::Display for ApproxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxMethod {
    pub kind: ApproxKind,
    #[serde(default)]
    pub z_anchor: f64,
}

impl ApproxMethod {
    pub fn new(kind: ApproxKind) -> Self {
        ApproxMethod { kind, z_anchor: 0.0 }
    }
}

/// Kernel quantities shared by every bound.
#[derive(Clone, Debug)]
struct Geometry {
    n_aug: f64,
    sqrt_diag: Vec<f64>,
    kqq: f64,
    /// `(1/N) sum_i K_ii^{3/2}`
    mean_diag_32: f64,
}

impl Geometry {
    fn of(gram: &GramMatrix) -> Self {
        let n_aug = gram.dim() as f64;
        let diag = gram.diagonal();
        Geometry {
            n_aug,
            sqrt_diag: diag.iter().map(|d| d.max(0.0).sqrt()).collect(),
            kqq: diag[gram.dim() - 1],
            mean_diag_32: diag.iter().map(|d| d.max(0.0).powf(1.5)).sum::<f64>() / n_aug,
        }
    }

    /// `sqrt(K_ii) sqrt(K_qq) * scale` for every `i`.
    fn envelope(&self, scale: f64) -> Vec<f64> {
        let sq = self.kqq.sqrt();
        self.sqrt_diag.iter().map(|s| s * sq * scale).collect()
    }
}

/// `sqrt(K_ii) sqrt(K_qq) gamma rho / (lambda N)`.
pub fn tau0(gram: &GramMatrix, c: &SmoothnessConstants, lambda: f64) -> Vec<f64> {
    let g = Geometry::of(gram);
    g.envelope(c.gamma_score * c.rho / (lambda * g.n_aug))
}

/// `|d l(y, f_q) - d l(z, f_q)| / 2` at the query value `f_q` of the fit anchored at `z`.
pub fn rho1(y: f64, z: f64, base: &Predictor, loss: &LossSpec) -> f64 {
    rho1_at(y, z, base.query_value(), loss)
}

fn rho1_at(y: f64, z: f64, fq: f64, loss: &LossSpec) -> f64 {
    0.5 * (loss.d1(y, fq) - loss.d1(z, fq)).abs()
}

/// [`tau0`] with `rho` replaced by `rho1`.
pub fn tau1(gram: &GramMatrix, c: &SmoothnessConstants, lambda: f64, rho1: f64) -> Vec<f64> {
    let g = Geometry::of(gram);
    g.envelope(c.gamma_score * rho1 / (lambda * g.n_aug))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rho2 {
    pub rho1_tilde: f64,
    pub rho2: f64,
}

fn rho2_geom(g: &Geometry, c: &SmoothnessConstants, lambda: f64, rho1: f64) -> Rho2 {
    let rho1_tilde = (1.0 + g.kqq * c.beta2 / (lambda * g.n_aug)) * rho1;
    let rho2 = 0.5 * c.xi * g.kqq.sqrt() * g.mean_diag_32 * rho1_tilde * rho1_tilde
        + 2.0 * lambda * g.kqq * c.beta2 * rho1_tilde;
    Rho2 { rho1_tilde, rho2 }
}

/// Second-order constants:
/// `rho1~ = (1 + K_qq beta2 / (lambda N)) rho1` and
/// `rho2 = (xi/2) sqrt(K_qq) mean(K_ii^{3/2}) rho1~^2 + 2 lambda K_qq beta2 rho1~`.
pub fn rho2(gram: &GramMatrix, c: &SmoothnessConstants, lambda: f64, rho1: f64) -> Rho2 {
    rho2_geom(&Geometry::of(gram), c, lambda, rho1)
}

fn tau2_scale(g: &Geometry, c: &SmoothnessConstants, lambda: f64, rho1: f64) -> (f64, Rho2) {
    let r2 = rho2_geom(g, c, lambda, rho1);
    let second = r2.rho2 / (lambda.powi(3) * g.n_aug * g.n_aug);
    let first = 2.0 * rho1 / (lambda * g.n_aug);
    (c.gamma_score * second.min(first), r2)
}

/// `sqrt(K_ii) sqrt(K_qq) gamma min(rho2 / (lambda^3 N^2), 2 rho1 / (lambda N))`.
pub fn tau2(gram: &GramMatrix, c: &SmoothnessConstants, lambda: f64, rho1: f64) -> Vec<f64> {
    let g = Geometry::of(gram);
    g.envelope(tau2_scale(&g, c, lambda, rho1).0)
}

/// Coefficients of the influence of output `z_prime` at the query:
/// `-(1/N) d l(z', f_q) H^+ K e_q` with `H` the risk Hessian at `base`.
pub fn influence_vector(z_prime: f64, base: &Predictor) -> Result<DVector<f64>> {
    let n_aug = base.coeffs.len();
    let loss = base.problem().loss();
    let d = base.hessian_pinv_kernel_column(n_aug - 1)?;
    Ok(d * (-loss.d1(z_prime, base.query_value()) / n_aug as f64))
}

/// Coefficients `a(z) - I(z) + I(y)` of the first-order approximation of the fit at `y`.
pub fn if_predictor(y: f64, z: f64, base: &Predictor) -> Result<DVector<f64>> {
    let n_aug = base.coeffs.len();
    let loss = base.problem().loss();
    let fq = base.query_value();
    let d = base.hessian_pinv_kernel_column(n_aug - 1)?;
    Ok(&base.coeffs + d * ((loss.d1(z, fq) - loss.d1(y, fq)) / n_aug as f64))
}

/// Approximate scores, envelopes and constants at one candidate output.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxEvaluation {
    /// Training scores followed by the query score.
    pub scores: Vec<f64>,
    /// Envelope for each entry of `scores`.
    pub tau: Vec<f64>,
    pub rho1: f64,
    pub rho2: Option<f64>,
}

impl ApproxEvaluation {
    fn counts(&self) -> (usize, usize) {
        let n = self.scores.len() - 1;
        let (sq, tq) = (self.scores[n], self.tau[n]);
        let mut up = 0;
        let mut lo = 0;
        for (s, t) in self.scores[..n].iter().zip(&self.tau[..n]) {
            if s + t >= sq - tq {
                up += 1;
            }
            if s - t >= sq + tq {
                lo += 1;
            }
        }
        (up, lo)
    }

    /// `(upper, lower)` p-values.
    pub fn pvalues(&self) -> (f64, f64) {
        let n_aug = self.scores.len() as f64;
        let (up, lo) = self.counts();
        ((1 + up) as f64 / n_aug, (1 + lo) as f64 / n_aug)
    }
}

/// Single-fit approximation of the full conformal p-value function.
#[derive(Clone, Debug)]
pub struct ApproxConformal {
    method: ApproxMethod,
    targets: Vec<f64>,
    loss: LossSpec,
    lambda: f64,
    constants: SmoothnessConstants,
    geometry: Geometry,
    gram: Arc<GramMatrix>,
    base: Predictor,
    /// `K H^+ K e_q`, present for the influence-function kind.
    fitted_direction: Option<DVector<f64>>,
}

impl ApproxConformal {
    pub fn new(task: &RegressionTask, method: ApproxMethod) -> Result<Self> {
        Self::from_gram(task.gram()?, task.y.clone(), task.lambda, task.loss, method)
    }

    pub fn from_gram(
        gram: Arc<GramMatrix>,
        targets: Vec<f64>,
        lambda: f64,
        loss: LossSpec,
        method: ApproxMethod,
    ) -> Result<Self> {
        if !method.z_anchor.is_finite() {
            return Err(Error::input("anchor z must be finite"));
        }
        let constants = loss.smoothness_constants()?;
        let base = WeightedProblem::with_anchor(gram.clone(), targets.clone(), method.z_anchor, lambda, loss)?.fit()?;
        Self::from_base(base, method, constants)
    }

    /// Reuses a fit anchored at `method.z_anchor`.
    pub fn from_base(base: Predictor, method: ApproxMethod, constants: SmoothnessConstants) -> Result<Self> {
        let prob = base.problem();
        let n = prob.targets().len();
        if prob.weights()[n + 1] != 0.0 || prob.anchors().0 != method.z_anchor {
            return Err(Error::input("base fit must use weights u with the method's anchor"));
        }
        let gram = prob.gram().clone();
        let fitted_direction = match method.kind {
            ApproxKind::InfluenceFunction => Some(base.hessian_solver()?.pinv_kernel_column(n)?.1),
            _ => None,
        };
        Ok(ApproxConformal {
            method,
            targets: prob.targets().to_vec(),
            loss: prob.loss(),
            lambda: prob.lambda(),
            constants,
            geometry: Geometry::of(&gram),
            gram,
            base,
            fitted_direction,
        })
    }

    /// Same base fit, another kind of approximation.
    pub fn with_kind(&self, kind: ApproxKind) -> Result<Self> {
        let method = ApproxMethod { kind, ..self.method };
        Self::from_base(self.base.clone(), method, self.constants)
    }

    pub fn method(&self) -> ApproxMethod {
        self.method
    }

    pub fn base(&self) -> &Predictor {
        &self.base
    }

    pub fn gram(&self) -> &Arc<GramMatrix> {
        &self.gram
    }

    pub fn constants(&self) -> &SmoothnessConstants {
        &self.constants
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Coefficients of the approximate predictor at `y`.
    pub fn predictor_coeffs(&self, y: f64) -> Result<DVector<f64>> {
        match self.method.kind {
            ApproxKind::InfluenceFunction => if_predictor(y, self.method.z_anchor, &self.base),
            _ => Ok(self.base.coeffs.clone()),
        }
    }

    fn fitted_at(&self, y: f64) -> DVector<f64> {
        match &self.fitted_direction {
            Some(dir) => {
                let fq = self.base.query_value();
                let c = (self.loss.d1(self.method.z_anchor, fq) - self.loss.d1(y, fq)) / self.geometry.n_aug;
                &self.base.fitted + dir * c
            }
            None => self.base.fitted.clone(),
        }
    }

    pub fn evaluate(&self, y: f64) -> ApproxEvaluation {
        let g = &self.geometry;
        let c = &self.constants;
        let fitted = self.fitted_at(y);
        let n = self.targets.len();
        let mut scores: Vec<f64> = self.targets.iter().zip(fitted.iter()).map(|(&t, &f)| score(t, f)).collect();
        scores.push(score(y, fitted[n]));
        let r1 = rho1_at(y, self.method.z_anchor, self.base.query_value(), &self.loss);
        let (scale, rho2) = match self.method.kind {
            ApproxKind::UniformStability => (c.gamma_score * c.rho / (self.lambda * g.n_aug), None),
            ApproxKind::LocalStability => (c.gamma_score * r1 / (self.lambda * g.n_aug), None),
            ApproxKind::InfluenceFunction => {
                let (s, r2) = tau2_scale(g, c, self.lambda, r1);
                (s, Some(r2.rho2))
            }
        };
        ApproxEvaluation {
            scores,
            tau: g.envelope(scale),
            rho1: r1,
            rho2,
        }
    }

    /// `(upper, lower)` p-values at `y`.
    pub fn pvalues(&self, y: f64) -> (f64, f64) {
        self.evaluate(y).pvalues()
    }

    pub fn curve(&self, grid: YGrid) -> PValueCurve {
        let mut upper = Vec::with_capacity(grid.m);
        let mut lower = Vec::with_capacity(grid.m);
        let mut diag = CurveDiagnostics::default();
        for y in grid.points() {
            let ev = self.evaluate(y);
            let (u, l) = ev.pvalues();
            upper.push(u);
            lower.push(l);
            diag.tau_test.push(*ev.tau.last().unwrap_or(&0.0));
            diag.rho1.push(ev.rho1);
            diag.rho2.push(ev.rho2.unwrap_or(f64::NAN));
        }
        PValueCurve {
            grid,
            upper,
            lower,
            diagnostics: Some(diag),
        }
    }

    /// `(upper, lower)` regions.
    pub fn regions(&self, grid: YGrid, alpha: f64) -> (PredictionRegion, PredictionRegion) {
        let curve = self.curve(grid);
        (curve.upper_region(alpha), curve.lower_region(alpha))
    }

    /// Largest envelope over the grid and all points.
    pub fn tau_sup(&self, grid: YGrid) -> f64 {
        grid.points()
            .map(|y| self.evaluate(y).tau.into_iter().fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    /// Lebesgue measures of the upper and lower regions with boundaries
    /// located by bisection between grid points.
    pub fn refined_measures(&self, grid: YGrid, alpha: f64) -> (f64, f64) {
        let upper = refined_measure(grid, |y| self.pvalues(y).0 > alpha);
        let lower = refined_measure(grid, |y| self.pvalues(y).1 > alpha);
        (upper, lower)
    }
}

/// Measure of `{y in [lo, hi] : inside(y)}` with transitions between adjacent
/// grid points resolved by bisection. Features narrower than a cell and not
/// touching a grid point are missed.
pub fn refined_measure(grid: YGrid, inside: impl Fn(f64) -> bool) -> f64 {
    let mask: Vec<bool> = grid.points().map(&inside).collect();
    let boundary = |j: usize| {
        let (mut a, mut b) = (grid.point(j), grid.point(j + 1));
        let a_in = mask[j];
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (a + b);
            if inside(mid) == a_in {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };
    let region = PredictionRegion { grid, mask: mask.clone() };
    region
        .index_runs()
        .into_iter()
        .map(|(s, e)| {
            let left = if s == 0 { grid.lo } else { boundary(s - 1) };
            let right = if e + 1 == grid.m { grid.hi } else { boundary(e) };
            right - left
        })
        .sum()
}

/// `step * #{cells in upper but not in lower}`.
pub fn thickness_gap(upper: &PredictionRegion, lower: &PredictionRegion) -> Result<f64> {
    if upper.grid != lower.grid {
        return Err(Error::input("thickness gap needs regions on the same grid"));
    }
    let cells = upper.mask.iter().zip(&lower.mask).filter(|(&u, &l)| u && !l).count();
    Ok(upper.grid.step() * cells as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundBranch {
    /// `8 gamma rho kappa^2 / (lambda N)`
    Uniform,
    /// `12 T / (1 - beta)` with `beta = beta1 kappa^2 / (lambda N) < 1`
    Refined,
    /// `8 (gamma rho kappa^2 / (lambda N) + T)` when `beta >= 1`
    Crude,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThicknessBound {
    pub value: f64,
    pub branch: BoundBranch,
    pub beta: Option<f64>,
}

/// Theoretical upper bound on the thickness. `tau2_sup` is the supremum of
/// `tau2` over the grid and points; it is used only for the influence-function kind.
pub fn thickness_bound(
    kind: ApproxKind,
    gram: &GramMatrix,
    c: &SmoothnessConstants,
    lambda: f64,
    tau2_sup: f64,
) -> Result<ThicknessBound> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::input(format!("lambda must be positive, got {lambda}")));
    }
    let n_aug = gram.dim() as f64;
    let kappa2 = gram.diag_max();
    let uniform = c.gamma_score * c.rho * kappa2 / (lambda * n_aug);
    Ok(match kind {
        ApproxKind::UniformStability | ApproxKind::LocalStability => ThicknessBound {
            value: 8.0 * uniform,
            branch: BoundBranch::Uniform,
            beta: None,
        },
        ApproxKind::InfluenceFunction => {
            if !(tau2_sup >= 0.0 && tau2_sup.is_finite()) {
                return Err(Error::input(format!("tau2 supremum must be finite and >= 0, got {tau2_sup}")));
            }
            let beta = c.beta1 * kappa2 / (lambda * n_aug);
            if beta < 1.0 {
                ThicknessBound {
                    value: 12.0 * tau2_sup / (1.0 - beta),
                    branch: BoundBranch::Refined,
                    beta: Some(beta),
                }
            } else {
                ThicknessBound {
                    value: 8.0 * (uniform + tau2_sup),
                    branch: BoundBranch::Crude,
                    beta: Some(beta),
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, KernelSpec};
    use crate::solver::rkhs_norm_diff;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_gram(n_aug: usize) -> GramMatrix {
        GramMatrix::from_matrix(DMatrix::identity(n_aug, n_aug)).unwrap()
    }

    fn consts(rho: f64, beta: f64, xi: f64) -> SmoothnessConstants {
        SmoothnessConstants {
            rho,
            beta2: beta,
            beta1: beta,
            xi,
            gamma_score: 1.0,
        }
    }

    fn task(n: usize, seed: u64, loss: LossSpec, lambda: f64) -> RegressionTask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let y = x.iter().map(|r| 3.0 * r[0] + r[1] * r[2] + 0.5 * rng.random::<f64>()).collect();
        RegressionTask {
            x,
            y,
            x_query: vec![0.4, 0.6, 0.5],
            kernel: KernelSpec::default(),
            loss,
            lambda,
        }
    }

    #[test]
    fn tau0_examples() {
        let g = unit_gram(10);
        let t = tau0(&g, &consts(1.0, 1.0, 1.0), 0.1);
        assert!(t.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(tau0(&g, &consts(0.0, 1.0, 1.0), 0.1).iter().all(|&v| v == 0.0));
        let half = tau0(&g, &consts(1.0, 1.0, 1.0), 0.2);
        assert!(half.iter().zip(&t).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));
        let t1 = tau1(&g, &consts(1.0, 1.0, 1.0), 0.1, 0.5);
        assert!(t1.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn rho_examples() {
        let t = task(6, 1, LossSpec::Logcosh { a: 1.0 }, 0.5);
        let base = WeightedProblem::with_anchor(t.gram().unwrap(), t.y.clone(), 0.0, 0.5, t.loss)
            .unwrap()
            .fit()
            .unwrap();
        assert_eq!(rho1(0.3, 0.3, &base, &t.loss), 0.0);
        assert_relative_eq!(rho1_at(1.0, 0.0, 0.0, &t.loss), 0.5 * 1.0f64.tanh(), epsilon = 1e-15);
        assert_relative_eq!(rho1_at(1.0, 0.0, 0.0, &t.loss), 0.380_797, epsilon = 1e-6);
        for y in [-50.0, -1.0, 0.0, 2.0, 80.0] {
            assert!(rho1(y, 0.0, &base, &t.loss) <= 1.0);
        }

        let g = unit_gram(10);
        let r = rho2(&g, &consts(1.0, 1.0, 1.0), 1.0, 0.5);
        assert_relative_eq!(r.rho1_tilde, 0.55, epsilon = 1e-15);
        // 0.5 * 1 * 1 * 0.55^2 + 2 * 1 * 1 * 1 * 0.55
        assert_relative_eq!(r.rho2, 0.151_25 + 1.1, epsilon = 1e-14);
        assert_eq!(rho2(&g, &consts(1.0, 1.0, 1.0), 1.0, 0.0).rho2, 0.0);
        assert!(rho2(&g, &consts(1.0, 1.0, 2.0), 1.0, 0.5).rho2 > r.rho2);

        let t2 = tau2(&g, &consts(1.0, 1.0, 1.0), 1.0, 0.5);
        let t1 = tau1(&g, &consts(1.0, 1.0, 1.0), 1.0, 0.5);
        assert!(t2.iter().zip(&t1).all(|(a, b)| *a <= 2.0 * b + 1e-15));
        assert!(tau2(&g, &consts(1.0, 1.0, 1.0), 1.0, 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn influence_vector_examples() {
        let t = task(10, 2, LossSpec::Logcosh { a: 1.0 }, 0.3);
        let base = WeightedProblem::with_anchor(t.gram().unwrap(), t.y.clone(), 0.0, 0.3, t.loss)
            .unwrap()
            .fit()
            .unwrap();
        let iv = influence_vector(base.query_value(), &base).unwrap();
        assert!(iv.norm() == 0.0);
        assert_eq!(if_predictor(0.0, 0.0, &base).unwrap(), base.coeffs);
        let d = base.hessian_pinv_kernel_column(10).unwrap();
        let diff = if_predictor(1.0, 0.0, &base).unwrap() - if_predictor(-2.0, 0.0, &base).unwrap();
        let cos = diff.dot(&d) / (diff.norm() * d.norm());
        assert!((cos.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn influence_vector_squared_by_hand() {
        // 3 x 3 Gram matrix, squared loss: H = (2/3) K K + 2 lambda K.
        let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.4, 0.2, 0.4, 1.0]);
        let g = Arc::new(GramMatrix::from_matrix(k.clone()).unwrap());
        let lambda = 0.25;
        let base = WeightedProblem::with_anchor(g, vec![1.0, -1.0], 0.5, lambda, LossSpec::Squared)
            .unwrap()
            .fit()
            .unwrap();
        let h = &k * &k * (2.0 / 3.0) + &k * (2.0 * lambda);
        let sol = h.lu().solve(&k.column(2).into_owned()).unwrap();
        let fq = base.query_value();
        let expected = sol * (-(-2.0 * (1.7 - fq)) / 3.0);
        let iv = influence_vector(1.7, &base).unwrap();
        assert_relative_eq!(iv, expected, epsilon = 1e-10);
    }

    #[test]
    fn curve_properties() {
        let t = task(15, 3, LossSpec::PseudoHuber { a: 1.0 }, 0.2);
        let grid = YGrid::covering(&t.y, 0.5, 51).unwrap();
        let u = ApproxConformal::new(&t, ApproxMethod::new(ApproxKind::UniformStability)).unwrap();
        let l = u.with_kind(ApproxKind::LocalStability).unwrap();
        let f = u.with_kind(ApproxKind::InfluenceFunction).unwrap();
        let (cu, cl, cf) = (u.curve(grid), l.curve(grid), f.curve(grid));
        for c in [&cu, &cl, &cf] {
            assert!(c.lower.iter().zip(&c.upper).all(|(a, b)| a <= b));
        }
        for i in 0..grid.m {
            assert!(cl.upper[i] <= cu.upper[i]);
            assert!(cl.lower[i] >= cu.lower[i]);
        }
        assert!(cf.diagnostics.as_ref().unwrap().rho2.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_envelope_collapses_to_plain_scores() {
        let t = task(9, 4, LossSpec::Logcosh { a: 1.0 }, 0.4);
        let a = ApproxConformal::new(&t, ApproxMethod::new(ApproxKind::LocalStability)).unwrap();
        // At y = z the local envelope vanishes.
        let ev = a.evaluate(0.0);
        assert!(ev.tau.iter().all(|&v| v == 0.0));
        let (u, l) = ev.pvalues();
        let n = ev.scores.len() - 1;
        let exact = crate::conformal::conformal_pvalue(&ev.scores[..n], ev.scores[n]);
        assert_eq!((u, l), (exact, exact));
    }

    #[test]
    fn if_error_bound_small_instance() {
        let t = task(12, 5, LossSpec::Logcosh { a: 1.0 }, 0.5);
        let a = ApproxConformal::new(&t, ApproxMethod::new(ApproxKind::InfluenceFunction)).unwrap();
        let g = a.gram().clone();
        let kqq = g.diagonal()[12];
        for y in [-3.0, -0.5, 0.7, 2.0, 5.0] {
            let exact = WeightedProblem::with_candidate(g.clone(), t.y.clone(), 0.0, y, 0.5, t.loss)
                .unwrap()
                .fit()
                .unwrap();
            let approx = a.predictor_coeffs(y).unwrap();
            let err = rkhs_norm_diff(&exact.coeffs, &approx, &g).unwrap();
            let ev = a.evaluate(y);
            let n_aug = 13.0;
            let bound = kqq.sqrt() * (ev.rho2.unwrap() / (0.125 * n_aug * n_aug)).min(2.0 * ev.rho1 / (0.5 * n_aug));
            assert!(err <= bound + 1e-9, "y={y}: {err} > {bound}");
        }
    }

    #[test]
    fn thickness_gap_examples() {
        let grid = YGrid::new(0.0, 10.0, 101).unwrap();
        let full = PredictionRegion::full(grid);
        let empty = PredictionRegion::empty(grid);
        assert_eq!(thickness_gap(&full, &full).unwrap(), 0.0);
        assert_relative_eq!(thickness_gap(&full, &empty).unwrap(), 10.1, epsilon = 1e-12);
        let other = PredictionRegion::full(YGrid::new(0.0, 1.0, 101).unwrap());
        assert!(thickness_gap(&full, &other).is_err());
    }

    #[test]
    fn thickness_bound_examples() {
        let g = unit_gram(10);
        let c = consts(1.0, 1.0, 1.0);
        let b = thickness_bound(ApproxKind::UniformStability, &g, &c, 0.1, 0.0).unwrap();
        assert_relative_eq!(b.value, 8.0, epsilon = 1e-12);
        assert_eq!(b.branch, BoundBranch::Uniform);
        assert_eq!(thickness_bound(ApproxKind::LocalStability, &g, &c, 0.1, 0.0).unwrap().value, b.value);

        let refined = thickness_bound(ApproxKind::InfluenceFunction, &g, &c, 1.0, 0.01).unwrap();
        assert_eq!(refined.branch, BoundBranch::Refined);
        assert_relative_eq!(refined.value, 12.0 * 0.01 / 0.9, epsilon = 1e-14);
        let crude = thickness_bound(ApproxKind::InfluenceFunction, &g, &c, 0.05, 0.01).unwrap();
        assert_eq!(crude.branch, BoundBranch::Crude);
        assert_relative_eq!(crude.value, 8.0 * (2.0 + 0.01), epsilon = 1e-12);
    }

    #[test]
    fn refined_measure_of_an_interval() {
        let grid = YGrid::new(0.0, 1.0, 11).unwrap();
        let m = refined_measure(grid, |y| (0.234..=0.789).contains(&y));
        assert_relative_eq!(m, 0.555, epsilon = 1e-12);
        assert_relative_eq!(refined_measure(grid, |_| true), 1.0);
        assert_eq!(refined_measure(grid, |_| false), 0.0);
    }

    #[test]
    fn refined_measures_bracket_cell_counts() {
        let t = task(20, 6, LossSpec::Logcosh { a: 1.0 }, 0.3);
        let grid = YGrid::covering(&t.y, 0.5, 101).unwrap();
        let a = ApproxConformal::new(&t, ApproxMethod::new(ApproxKind::UniformStability)).unwrap();
        let (up, lo) = a.regions(grid, 0.1);
        let (mu, ml) = a.refined_measures(grid, 0.1);
        assert!((mu - up.measure()).abs() <= 2.0 * grid.step());
        assert!((ml - lo.measure()).abs() <= 2.0 * grid.step());
        assert!(mu >= ml);
    }

    #[test]
    fn squared_loss_is_rejected() {
        let t = task(5, 7, LossSpec::Squared, 0.3);
        assert!(ApproxConformal::new(&t, ApproxMethod::new(ApproxKind::UniformStability)).is_err());
    }

    #[test]
    fn kind_serde_and_names() {
        let m: ApproxMethod = serde_json::from_str(r#"{"kind":"influence_function"}"#).unwrap();
        assert_eq!(m, ApproxMethod::new(ApproxKind::InfluenceFunction));
        assert_eq!(ApproxKind::LocalStability.to_string(), "LocStableCP");
        assert_eq!(ApproxKind::ALL.map(|k| k.order()), [0, 1, 2]);
    }

    #[test]
    fn gram_helper_is_used_consistently() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1]).collect();
        let g = gram(&KernelSpec::default(), &pts).unwrap();
        let c = consts(1.0, 1.0, 1.0);
        let t0 = tau0(&g, &c, 1.0);
        assert!(t0.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }
}
