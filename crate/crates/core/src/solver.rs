//! Weighted regularized risk over coefficient vectors and its damped Newton
//! minimizer.
//!
//! The augmented sample has `N = n + 1` points: `n` labeled points followed by
//! the query input, which carries two candidate outputs `z` and `y`. For a
//! weight vector `v` of length `n + 2` and coefficients `a` the risk is
//!
//! ```text
//! R(v; a) = (1/N) [ sum_i v_i l(Y_i, (Ka)_i) + v_{n+1} l(z, (Ka)_N) + v_{n+2} l(y, (Ka)_N) ]
//!           + lambda a^T K a
//! ```
//!
//! Iterations run in the feature coordinates of [`FeatureMap`], where the
//! penalty is `lambda |b|^2` and the Newton system is positive definite. Each
//! iterate maps back to a coefficient vector in the range of `K`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{FeatureMap, GramMatrix};
use crate::losses::LossSpec;

pub const MAX_ITERS: usize = 100;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const GRAD_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct WeightedProblem {
    gram: Arc<GramMatrix>,
    targets: Vec<f64>,
    z: f64,
    y: f64,
    weights: Vec<f64>,
    lambda: f64,
    loss: LossSpec,
}

impl WeightedProblem {
    pub fn new(
        gram: Arc<GramMatrix>,
        targets: Vec<f64>,
        (z, y): (f64, f64),
        weights: Vec<f64>,
        lambda: f64,
        loss: LossSpec,
    ) -> Result<Self> {
        let n_aug = gram.dim();
        if targets.len() + 1 != n_aug {
            return Err(Error::input(format!(
                "expected {} targets for a Gram matrix of dimension {n_aug}, got {}",
                n_aug - 1,
                targets.len()
            )));
        }
        if weights.len() != n_aug + 1 {
            return Err(Error::input(format!(
                "expected {} weights, got {}",
                n_aug + 1,
                weights.len()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::input(format!("lambda must be positive, got {lambda}")));
        }
        if weights.iter().chain(&targets).chain([&z, &y]).any(|v| !v.is_finite()) {
            return Err(Error::input("targets, anchors and weights must be finite"));
        }
        loss.validate()?;
        Ok(WeightedProblem {
            gram,
            targets,
            z,
            y,
            weights,
            lambda,
            loss,
        })
    }

    /// Weights `u = (1, ..., 1, 1, 0)`: the query carries output `z`.
    pub fn with_anchor(gram: Arc<GramMatrix>, targets: Vec<f64>, z: f64, lambda: f64, loss: LossSpec) -> Result<Self> {
        let w = canonical_weights(targets.len(), true);
        Self::new(gram, targets, (z, z), w, lambda, loss)
    }

    /// Weights `w = (1, ..., 1, 0, 1)`: the query carries output `y`, with `z` inert.
    pub fn with_candidate(
        gram: Arc<GramMatrix>,
        targets: Vec<f64>,
        z: f64,
        y: f64,
        lambda: f64,
        loss: LossSpec,
    ) -> Result<Self> {
        let w = canonical_weights(targets.len(), false);
        Self::new(gram, targets, (z, y), w, lambda, loss)
    }

    /// Plain regularized fit on a labeled sample; the last point plays the
    /// role of the anchored query.
    pub fn on_sample(gram: Arc<GramMatrix>, targets: &[f64], lambda: f64, loss: LossSpec) -> Result<Self> {
        let (last, head) = targets
            .split_last()
            .ok_or_else(|| Error::input("cannot fit an empty sample"))?;
        Self::with_anchor(gram, head.to_vec(), *last, lambda, loss)
    }

    /// Same problem with other weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(
            self.gram.clone(),
            self.targets.clone(),
            (self.z, self.y),
            weights,
            self.lambda,
            self.loss,
        )
    }

    /// Same problem with other anchors.
    pub fn with_anchors(&self, z: f64, y: f64) -> Result<Self> {
        Self::new(
            self.gram.clone(),
            self.targets.clone(),
            (z, y),
            self.weights.clone(),
            self.lambda,
            self.loss,
        )
    }

    pub fn gram(&self) -> &Arc<GramMatrix> {
        &self.gram
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn anchors(&self) -> (f64, f64) {
        (self.z, self.y)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn loss(&self) -> LossSpec {
        self.loss
    }

    /// Number of points in the augmented sample.
    pub fn dim(&self) -> usize {
        self.gram.dim()
    }

    /// Weighted per-point loss derivative of the given order (0 = value) at fitted values `f`.
    fn pointwise(&self, f: &DVector<f64>, order: u8) -> DVector<f64> {
        let n = self.targets.len();
        let eval = |y: f64, u: f64| match order {
            0 => self.loss.value(y, u),
            1 => self.loss.d1(y, u),
            2 => self.loss.d2(y, u),
            _ => self.loss.d3(y, u),
        };
        let mut out = DVector::zeros(n + 1);
        for i in 0..n {
            if self.weights[i] != 0.0 {
                out[i] = self.weights[i] * eval(self.targets[i], f[i]);
            }
        }
        let (vz, vy) = (self.weights[n], self.weights[n + 1]);
        if vz != 0.0 {
            out[n] += vz * eval(self.z, f[n]);
        }
        if vy != 0.0 {
            out[n] += vy * eval(self.y, f[n]);
        }
        out
    }

    fn data_risk(&self, f: &DVector<f64>) -> f64 {
        self.pointwise(f, 0).sum() / self.dim() as f64
    }

    fn check_len(&self, a: &DVector<f64>) -> Result<()> {
        if a.len() != self.dim() {
            return Err(Error::input(format!(
                "coefficient vector has length {}, expected {}",
                a.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn risk(&self, a: &DVector<f64>) -> Result<f64> {
        self.check_len(a)?;
        let ka = self.gram.entries() * a;
        Ok(self.data_risk(&ka) + self.lambda * a.dot(&ka))
    }

    pub fn gradient(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(a)?;
        let k = self.gram.entries();
        let ka = k * a;
        let g = self.pointwise(&ka, 1) / self.dim() as f64;
        Ok(k * g + ka * (2.0 * self.lambda))
    }

    /// `K diag(h) K / N + 2 lambda K` with `h` the weighted second derivatives.
    pub fn hessian(&self, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_len(a)?;
        let k = self.gram.entries();
        let ka = k * a;
        let h = self.pointwise(&ka, 2) / self.dim() as f64;
        let mut dk = k.clone();
        for (i, hi) in h.iter().enumerate() {
            dk.row_mut(i).scale_mut(*hi);
        }
        Ok(k * dk + k * (2.0 * self.lambda))
    }

    /// Norm of the target vector used to scale the stopping rule.
    fn target_scale(&self) -> f64 {
        let n = self.targets.len();
        let anchor = if self.weights[n + 1] != 0.0 && self.weights[n] == 0.0 {
            self.y
        } else {
            self.z
        };
        (self.targets.iter().map(|t| t * t).sum::<f64>() + anchor * anchor).sqrt()
    }

    fn feature_risk(&self, fm: &FeatureMap, b: &DVector<f64>) -> (f64, DVector<f64>) {
        let f = &fm.phi * b;
        (self.data_risk(&f) + self.lambda * b.norm_squared(), f)
    }

    /// `Phi^T diag(h) Phi / N + 2 lambda I` at fitted values `f`.
    fn feature_hessian(&self, fm: &FeatureMap, f: &DVector<f64>) -> DMatrix<f64> {
        let h = self.pointwise(f, 2) / self.dim() as f64;
        let mut scaled = fm.phi.clone();
        for (i, hi) in h.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*hi);
        }
        let mut hb = fm.phi.tr_mul(&scaled);
        for j in 0..hb.nrows() {
            hb[(j, j)] += 2.0 * self.lambda;
        }
        hb
    }

    pub fn fit(&self) -> Result<Predictor> {
        let fm = self.gram.features();
        self.fit_features(DVector::zeros(fm.rank()))
    }

    /// Fit starting from coefficients `a0` (projected onto the range of `K`).
    pub fn fit_from(&self, a0: &DVector<f64>) -> Result<Predictor> {
        self.check_len(a0)?;
        let b0 = self.gram.features().to_features(a0);
        self.fit_features(b0)
    }

    fn fit_features(&self, mut b: DVector<f64>) -> Result<Predictor> {
        let fm = self.gram.features();
        let n_aug = self.dim() as f64;
        let tol = GRAD_TOL * (1.0 + self.target_scale() / n_aug);
        let (mut risk, mut f) = self.feature_risk(fm, &b);
        let mut grad_a_norm = f64::INFINITY;
        for iter in 0..=MAX_ITERS {
            let g = self.pointwise(&f, 1) / n_aug;
            let grad_b = fm.phi.tr_mul(&g) + &b * (2.0 * self.lambda);
            grad_a_norm = (&fm.phi * &grad_b).norm();
            if grad_a_norm <= tol {
                return Ok(Predictor::new(self.clone(), b, f, true, grad_a_norm, iter));
            }
            if iter == MAX_ITERS {
                break;
            }
            let hb = self.feature_hessian(fm, &f);
            let mut dir = match Cholesky::new(hb) {
                Some(ch) => -ch.solve(&grad_b),
                None => -grad_b.clone(),
            };
            let mut slope = grad_b.dot(&dir);
            if slope.is_nan() || slope >= 0.0 {
                dir = -grad_b.clone();
                slope = -grad_b.norm_squared();
            }
            let roundoff = 64.0 * f64::EPSILON * (1.0 + risk.abs());
            let (nb, nr, nf) = if -slope <= roundoff {
                // The predicted decrease is below round-off: risk values can no
                // longer rank candidates, so take the full Newton step.
                let cand = &b + &dir;
                let (r, fc) = self.feature_risk(fm, &cand);
                if r > risk + roundoff {
                    break;
                }
                (cand, r, fc)
            } else {
                let mut step = 1.0;
                let mut accepted = None;
                for _ in 0..=MAX_HALVINGS {
                    let cand = &b + &dir * step;
                    let (r, fc) = self.feature_risk(fm, &cand);
                    if r <= risk + ARMIJO_C * step * slope {
                        accepted = Some((cand, r, fc));
                        break;
                    }
                    step *= 0.5;
                }
                match accepted {
                    Some(x) => x,
                    None => break,
                }
            };
            b = nb;
            risk = nr;
            f = nf;
        }
        Err(Error::Solver {
            iterations: MAX_ITERS,
            grad_norm: grad_a_norm,
            last_iterate: fm.to_coefficients(&b).iter().cloned().collect(),
        })
    }
}

/// `(1, ..., 1, 1, 0)` when `anchor_z`, else `(1, ..., 1, 0, 1)`, for `n` labeled points.
pub fn canonical_weights(n: usize, anchor_z: bool) -> Vec<f64> {
    let mut w = vec![1.0; n + 2];
    if anchor_z {
        w[n + 1] = 0.0;
    } else {
        w[n] = 0.0;
    }
    w
}

/// Minimizer of a [`WeightedProblem`].
#[derive(Clone, Debug)]
pub struct Predictor {
    pub coeffs: DVector<f64>,
    /// `K a`, the fitted values on the augmented sample.
    pub fitted: DVector<f64>,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    features: DVector<f64>,
    problem: WeightedProblem,
}

impl Predictor {
    fn new(
        problem: WeightedProblem,
        features: DVector<f64>,
        fitted: DVector<f64>,
        converged: bool,
        grad_norm: f64,
        iterations: usize,
    ) -> Self {
        let coeffs = problem.gram.features().to_coefficients(&features);
        Predictor {
            coeffs,
            fitted,
            converged,
            grad_norm,
            iterations,
            features,
            problem,
        }
    }

    pub fn problem(&self) -> &WeightedProblem {
        &self.problem
    }

    /// Fitted value at the query input.
    pub fn query_value(&self) -> f64 {
        self.fitted[self.fitted.len() - 1]
    }

    /// `a^T row` for `row = (k(X_1, x), ..., k(X_N, x))`.
    pub fn predict(&self, kernel_row: &DVector<f64>) -> Result<f64> {
        if kernel_row.len() != self.coeffs.len() {
            return Err(Error::input(format!(
                "kernel row has length {}, expected {}",
                kernel_row.len(),
                self.coeffs.len()
            )));
        }
        Ok(self.coeffs.dot(kernel_row))
    }

    /// Solves against the Hessian of the risk at this predictor.
    pub fn hessian_solver(&self) -> Result<HessianSolver<'_>> {
        let fm = self.problem.gram.features();
        let hb = self.problem.feature_hessian(fm, &self.fitted);
        let chol = Cholesky::new(hb).ok_or_else(|| Error::input("Hessian is not positive definite on the range of K"))?;
        Ok(HessianSolver { fm, chol })
    }

    /// `H^+ K e_j` with `H` the risk Hessian at this predictor.
    pub fn hessian_pinv_kernel_column(&self, j: usize) -> Result<DVector<f64>> {
        Ok(self.hessian_solver()?.pinv_kernel_column(j)?.0)
    }

    /// Feature coordinates of the coefficients.
    pub fn features(&self) -> &DVector<f64> {
        &self.features
    }
}

/// Factorized risk Hessian restricted to the range of `K`.
pub struct HessianSolver<'a> {
    fm: &'a FeatureMap,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl HessianSolver<'_> {
    /// `(H^+ K e_j, K H^+ K e_j)`.
    pub fn pinv_kernel_column(&self, j: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        if j >= self.fm.phi.nrows() {
            return Err(Error::input(format!("column index {j} out of range")));
        }
        let phi_j = self.fm.phi.row(j).transpose();
        let c = self.chol.solve(&phi_j);
        Ok((self.fm.to_coefficients(&c), &self.fm.phi * c))
    }
}

/// `sqrt((a1 - a2)^T K (a1 - a2))`.
pub fn rkhs_norm_diff(a1: &DVector<f64>, a2: &DVector<f64>, gram: &GramMatrix) -> Result<f64> {
    if a1.len() != a2.len() || a1.len() != gram.dim() {
        return Err(Error::input(format!(
            "length mismatch: {}, {} and Gram dimension {}",
            a1.len(),
            a2.len(),
            gram.dim()
        )));
    }
    let d = a1 - a2;
    Ok(d.dot(&(gram.entries() * &d)).max(0.0).sqrt())
}
