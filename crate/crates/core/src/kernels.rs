//! Kernel functions, Gram matrices and the spectral helpers built on them.
//!
//! A [`GramMatrix`] is immutable once built. Its eigendecomposition and the
//! derived feature map are computed lazily on first use and cached behind a
//! [`OnceLock`], so a Gram matrix can be shared read-only between threads.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used to define the numerical range of a
/// symmetric PSD matrix.
pub const DEFAULT_CUTOFF: f64 = 1e-12;

/// Negative eigenvalues below `-PSD_TOLERANCE * lambda_max` are reported.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(-gamma * ||x - x'||_1)`
    Laplacian,
    /// `exp(-gamma * ||x - x'||_2^2)`
    GaussianRbf,
}

/// Kernel bandwidth. `Auto` resolves to `1 / d` for `d`-dimensional inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BandwidthRepr", into = "BandwidthRepr")]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<BandwidthRepr> for Bandwidth {
    type Error = String;

    fn try_from(repr: BandwidthRepr) -> std::result::Result<Self, String> {
        match repr {
            BandwidthRepr::Number(g) if g > 0.0 && g.is_finite() => Ok(Bandwidth::Fixed(g)),
            BandwidthRepr::Number(g) => Err(format!("bandwidth must be positive, got {g}")),
            BandwidthRepr::Text(s) if s == "auto" => Ok(Bandwidth::Auto),
            BandwidthRepr::Text(s) => Err(format!("unknown bandwidth `{s}`")),
        }
    }
}

impl From<Bandwidth> for BandwidthRepr {
    fn from(b: Bandwidth) -> Self {
        match b {
            Bandwidth::Auto => BandwidthRepr::Text("auto".into()),
            Bandwidth::Fixed(g) => BandwidthRepr::Number(g),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            family: KernelFamily::Laplacian,
            bandwidth: Bandwidth::Auto,
        }
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: Bandwidth) -> Self {
        KernelSpec { family, bandwidth }
    }

    pub fn laplacian(gamma: f64) -> Self {
        KernelSpec::new(KernelFamily::Laplacian, Bandwidth::Fixed(gamma))
    }

    pub fn gaussian(gamma: f64) -> Self {
        KernelSpec::new(KernelFamily::GaussianRbf, Bandwidth::Fixed(gamma))
    }

    /// Resolve the bandwidth for inputs of dimension `dim`.
    pub fn resolve(&self, dim: usize) -> Result<ResolvedKernel> {
        if dim == 0 {
            return Err(Error::input("kernel inputs must have dimension >= 1"));
        }
        let gamma = match self.bandwidth {
            Bandwidth::Auto => 1.0 / dim as f64,
            Bandwidth::Fixed(g) => g,
        };
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::input(format!("bandwidth must be positive, got {gamma}")));
        }
        Ok(ResolvedKernel {
            family: self.family,
            gamma,
            dim,
        })
    }
}

/// A kernel with its bandwidth fixed for a given input dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedKernel {
    pub family: KernelFamily,
    pub gamma: f64,
    pub dim: usize,
}

impl ResolvedKernel {
    /// Evaluate without dimension checks; callers guarantee `x.len() == x2.len()`.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        let dist = match self.family {
            KernelFamily::Laplacian => x.iter().zip(x2).map(|(a, b)| (a - b).abs()).sum::<f64>(),
            KernelFamily::GaussianRbf => x
                .iter()
                .zip(x2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
        };
        (-self.gamma * dist).exp()
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != self.dim || x2.len() != self.dim {
            return Err(Error::input(format!(
                "kernel expects inputs of dimension {}, got {} and {}",
                self.dim,
                x.len(),
                x2.len()
            )));
        }
        Ok(self.eval_unchecked(x, x2))
    }

    /// `(k(p_1, x), ..., k(p_m, x))`
    pub fn row(&self, points: &[Vec<f64>], x: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(points.len());
        for (i, p) in points.iter().enumerate() {
            out[i] = self.eval(p, x)?;
        }
        Ok(out)
    }
}

pub fn eval_kernel(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            x2.len()
        )));
    }
    spec.resolve(x.len())?.eval(x, x2)
}

/// Kernel row `(k(p_1, x), ..., k(p_m, x))` for a point set of uniform dimension.
pub fn kernel_row(spec: &KernelSpec, points: &[Vec<f64>], x: &[f64]) -> Result<DVector<f64>> {
    spec.resolve(x.len())?.row(points, x)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub lambda_max: f64,
}

impl Spectrum {
    pub fn of(matrix: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(matrix.clone());
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        Spectrum {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
            lambda_max,
        }
    }

    /// Indices of eigenvalues strictly above `cutoff * lambda_max`.
    pub fn retained(&self, cutoff: f64) -> Vec<usize> {
        let threshold = cutoff * self.lambda_max;
        (0..self.values.len())
            .filter(|&i| self.values[i] > threshold && self.values[i] > 0.0)
            .collect()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `M^+ rhs` with eigenvalues at or below `cutoff * lambda_max` dropped.
    pub fn pinv_apply(&self, rhs: &DVector<f64>, cutoff: f64) -> DVector<f64> {
        let mut out = DVector::zeros(rhs.len());
        for i in self.retained(cutoff) {
            let v = self.vectors.column(i);
            let coef = v.dot(rhs) / self.values[i];
            out.axpy(coef, &v, 1.0);
        }
        out
    }

    /// Orthogonal projection onto the retained eigenspace.
    pub fn project(&self, x: &DVector<f64>, cutoff: f64) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for i in self.retained(cutoff) {
            let v = self.vectors.column(i);
            out.axpy(v.dot(x), &v, 1.0);
        }
        out
    }
}

/// `H^+ rhs` for a symmetric matrix `H`, zeroing eigenvalues `<= cutoff * lambda_max`.
pub fn pseudo_inverse_apply(h: &DMatrix<f64>, rhs: &DVector<f64>, cutoff: f64) -> Result<DVector<f64>> {
    if !h.is_square() || h.nrows() != rhs.len() {
        return Err(Error::input(format!(
            "pseudo-inverse: matrix is {}x{}, rhs has length {}",
            h.nrows(),
            h.ncols(),
            rhs.len()
        )));
    }
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::input(format!("cutoff must lie in (0, 1), got {cutoff}")));
    }
    Ok(Spectrum::of(h).pinv_apply(rhs, cutoff))
}

/// Coordinates in which the range of `K` is isometric to Euclidean space.
///
/// With `K = U diag(s) U^T` restricted to retained eigenpairs, the feature
/// matrix is `phi = U diag(sqrt(s))`, so that `K a = phi b` and
/// `a^T K a = |b|^2` for `a = U diag(1/sqrt(s)) b`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub basis: DMatrix<f64>,
    pub sqrt_values: DVector<f64>,
    pub phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn rank(&self) -> usize {
        self.sqrt_values.len()
    }

    /// Feature coordinates `b` of a coefficient vector `a` (its range component).
    pub fn to_features(&self, a: &DVector<f64>) -> DVector<f64> {
        let mut b = self.basis.tr_mul(a);
        b.component_mul_assign(&self.sqrt_values);
        b
    }

    /// Coefficient vector `a` in the range of `K` with feature coordinates `b`.
    pub fn to_coefficients(&self, b: &DVector<f64>) -> DVector<f64> {
        let c = b.component_div(&self.sqrt_values);
        &self.basis * c
    }
}

/// Kernel matrix over a point set, with cached spectral data.
pub struct GramMatrix {
    entries: DMatrix<f64>,
    diagonal: DVector<f64>,
    diag_max: f64,
    spectrum: OnceLock<Spectrum>,
    features: OnceLock<FeatureMap>,
}

impl fmt::Debug for GramMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GramMatrix")
            .field("dim", &self.dim())
            .field("diag_max", &self.diag_max)
            .finish()
    }
}

impl Clone for GramMatrix {
    fn clone(&self) -> Self {
        GramMatrix {
            entries: self.entries.clone(),
            diagonal: self.diagonal.clone(),
            diag_max: self.diag_max,
            spectrum: self.spectrum.clone(),
            features: self.features.clone(),
        }
    }
}

impl GramMatrix {
    /// Build from a matrix that must be square, finite and symmetric to 1e-12
    /// (relative); the stored copy is exactly symmetric.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::input("Gram matrix must be square and non-empty"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("Gram matrix has non-finite entries"));
        }
        let scale = m.amax().max(1.0);
        let n = m.nrows();
        let mut entries = m;
        for i in 0..n {
            for j in (i + 1)..n {
                if (entries[(i, j)] - entries[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::input(format!("Gram matrix not symmetric at ({i}, {j})")));
                }
                entries[(j, i)] = entries[(i, j)];
            }
        }
        Ok(Self::from_symmetric(entries))
    }

    fn from_symmetric(entries: DMatrix<f64>) -> Self {
        let diagonal = entries.diagonal();
        let diag_max = diagonal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        GramMatrix {
            entries,
            diagonal,
            diag_max,
            spectrum: OnceLock::new(),
            features: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diagonal
    }

    /// `max_i K_{i,i}`
    pub fn diag_max(&self) -> f64 {
        self.diag_max
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.entries.column(j).into_owned()
    }

    pub fn spectrum(&self) -> &Spectrum {
        self.spectrum.get_or_init(|| {
            let s = Spectrum::of(&self.entries);
            let min = s.min_value();
            if min < -PSD_TOLERANCE * s.lambda_max {
                log::warn!(
                    "Gram matrix is not PSD within tolerance: min eigenvalue {min:.3e}, max {:.3e}",
                    s.lambda_max
                );
            }
            s
        })
    }

    pub fn features(&self) -> &FeatureMap {
        self.features.get_or_init(|| {
            let s = self.spectrum();
            let keep = s.retained(DEFAULT_CUTOFF);
            let basis = s.vectors.select_columns(keep.iter());
            let sqrt_values = DVector::from_iterator(keep.len(), keep.iter().map(|&i| s.values[i].sqrt()));
            let mut phi = basis.clone();
            for (c, sv) in sqrt_values.iter().enumerate() {
                phi.column_mut(c).scale_mut(*sv);
            }
            FeatureMap {
                basis,
                sqrt_values,
                phi,
            }
        })
    }

    /// Smallest retained eigenvalue of `K / dim`.
    pub fn mu_star(&self) -> f64 {
        let s = self.spectrum();
        s.retained(DEFAULT_CUTOFF)
            .into_iter()
            .map(|i| s.values[i])
            .fold(f64::INFINITY, f64::min)
            / self.dim() as f64
    }

    /// Projection of `x` onto the range of `K`.
    pub fn project_range(&self, x: &DVector<f64>) -> DVector<f64> {
        self.spectrum().project(x, DEFAULT_CUTOFF)
    }
}

/// Gram matrix of `points` under `spec`.
pub fn gram(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<GramMatrix> {
    let first = points
        .first()
        .ok_or_else(|| Error::input("cannot build a Gram matrix from an empty point list"))?;
    let kernel = spec.resolve(first.len())?;
    if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.len() != kernel.dim) {
        return Err(Error::input(format!(
            "point {i} has dimension {}, expected {}",
            p.len(),
            kernel.dim
        )));
    }
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.eval_unchecked(&points[i], &points[i]);
        for j in (i + 1)..n {
            let v = kernel.eval_unchecked(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix::from_symmetric(k))
}
