//! Finite-dimensional Krein-space model for the two-dimensional massless
//! scalar and its flipped-sign partner field.
//!
//! Test functions live on a uniform grid with trapezoid quadrature. The
//! indefinite form comes from the logarithmic kernel
//! `-(1/4pi) ln(r^2 + eps^2)`, which is positive semidefinite only on the
//! subspace `D0` of functions with vanishing integral. The model adjoins
//! a distinguished null function `h` with unit integral and an abstract
//! vector `v0` whose pairings are prescribed: `<v0, f> = int f`,
//! `<v0, v0> = 0`, `(v0, v0) = 1`. The positive form dominates the
//! indefinite one, and the metric operator swapping `h` and `v0` while
//! fixing the orthocomplement block converts one form into the other.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::tolerances;

#[derive(Debug, Error)]
pub enum KreinError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no real null combination of the seed bumps (discriminant {discriminant:.3e})")]
    NoNullCombination { discriminant: f64 },
    #[error("distinguished vector is not null: <h,h> = {value:.3e}")]
    NotNull { value: f64 },
    #[error("positive Gram has eigenvalue {min_eigenvalue:.3e} below tolerance")]
    NotPositive { min_eigenvalue: f64 },
}

/// Default smoothing of the logarithmic kernel.
pub const DEFAULT_KERNEL_EPSILON: f64 = 1e-6;

/// Sector selector for the two-point structure: `Minus` is the
/// flipped-sign partner field whose kernel is the negative of the base
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormSign {
    Plus,
    Minus,
}

impl FormSign {
    pub fn factor(self) -> f64 {
        match self {
            FormSign::Plus => 1.0,
            FormSign::Minus => -1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Test basis
// ---------------------------------------------------------------------------

/// Real basis functions sampled on a quadrature grid, with their integrals
/// and the indefinite kernel Gram.
#[derive(Debug, Clone)]
pub struct TestBasis {
    half_width: f64,
    epsilon: f64,
    grid: Vec<f64>,
    weights: Vec<f64>,
    functions: Vec<DVector<f64>>,
    integrals: Vec<f64>,
    gram: DMatrix<f64>,
}

impl TestBasis {
    /// Gaussian bumps of common `width` centered evenly inside
    /// `[-0.7 L, 0.7 L]`, quadrature on `points` trapezoid nodes.
    pub fn gaussians(count: usize, width: f64, half_width: f64, points: usize) -> TestBasis {
        Self::gaussians_with_epsilon(count, width, half_width, points, DEFAULT_KERNEL_EPSILON)
    }

    pub fn gaussians_with_epsilon(
        count: usize,
        width: f64,
        half_width: f64,
        points: usize,
        epsilon: f64,
    ) -> TestBasis {
        assert!(count >= 2 && points >= 3);
        let step = 2.0 * half_width / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| -half_width + step * i as f64).collect();
        let mut weights = vec![step; points];
        weights[0] = 0.5 * step;
        weights[points - 1] = 0.5 * step;
        let reach = 0.7 * half_width;
        let centers: Vec<f64> = if count == 1 {
            vec![0.0]
        } else {
            (0..count)
                .map(|j| -reach + 2.0 * reach * j as f64 / (count - 1) as f64)
                .collect()
        };
        let functions: Vec<DVector<f64>> = centers
            .iter()
            .map(|&c| {
                DVector::from_iterator(
                    points,
                    grid.iter().map(|&x| (-(x - c) * (x - c) / (2.0 * width * width)).exp()),
                )
            })
            .collect();
        Self::assemble(half_width, epsilon, grid, weights, functions)
    }

    fn assemble(
        half_width: f64,
        epsilon: f64,
        grid: Vec<f64>,
        weights: Vec<f64>,
        functions: Vec<DVector<f64>>,
    ) -> TestBasis {
        let points = grid.len();
        let integrals: Vec<f64> =
            functions.iter().map(|f| (0..points).map(|a| weights[a] * f[a]).sum()).collect();
        // Gram = V^t K V with V the weight-scaled sample matrix.
        let kernel = DMatrix::from_fn(points, points, |a, b| {
            let r = grid[a] - grid[b];
            -(r * r + epsilon * epsilon).ln() / (4.0 * std::f64::consts::PI)
        });
        let v = DMatrix::from_fn(points, functions.len(), |a, j| weights[a] * functions[j][a]);
        let gram = v.transpose() * kernel * &v;
        let gram = (&gram + gram.transpose()) * 0.5;
        TestBasis { half_width, epsilon, grid, weights, functions, integrals, gram }
    }

    /// Same basis with `delta` added to the Gram diagonal; the perturbed
    /// kernel is strictly positive on the null-integral subspace.
    pub fn with_gram_ridge(&self, delta: f64) -> TestBasis {
        let mut out = self.clone();
        for i in 0..out.gram.nrows() {
            out.gram[(i, i)] += delta;
        }
        out
    }

    pub fn n_functions(&self) -> usize {
        self.functions.len()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn function_values(&self, j: usize) -> &DVector<f64> {
        &self.functions[j]
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn integrals(&self) -> &[f64] {
        &self.integrals
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Integral of a coefficient vector.
    pub fn integral(&self, coeffs: &DVector<Complex64>) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, c) in coeffs.iter().enumerate() {
            acc += c * self.integrals[j];
        }
        acc
    }

    /// Indefinite kernel inner product of coefficient vectors (conjugate
    /// linear in the first argument).
    pub fn kernel_inner(&self, f: &DVector<Complex64>, g: &DVector<Complex64>) -> Complex64 {
        let n = self.functions.len();
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                acc += f[i].conj() * self.gram[(i, j)] * g[j];
            }
        }
        acc
    }

    /// Most negative eigenvalue of the Gram restricted to the
    /// null-integral subspace, relative to the largest one.
    pub fn null_integral_psd_defect(&self) -> f64 {
        let n = self.functions.len();
        let basis = null_space(&DMatrix::from_fn(1, n, |_, j| self.integrals[j]));
        if basis.ncols() == 0 {
            return 0.0;
        }
        let restricted = basis.transpose() * &self.gram * &basis;
        let eig = restricted.symmetric_eigen();
        let max = eig.eigenvalues.amax().max(1e-300);
        -eig.eigenvalues.min() / max
    }
}

/// Orthonormal basis of the null space of a real matrix, read off from the
/// near-zero eigenvectors of `C^t C`.
fn null_space(constraints: &DMatrix<f64>) -> DMatrix<f64> {
    let n = constraints.ncols();
    let eig = (constraints.transpose() * constraints).symmetric_eigen();
    let max = eig.eigenvalues.amax().max(1e-300);
    let cols: Vec<usize> =
        (0..n).filter(|&k| eig.eigenvalues[k] <= 1e-12 * max).collect();
    DMatrix::from_fn(n, cols.len(), |i, c| eig.eigenvectors[(i, cols[c])])
}

// ---------------------------------------------------------------------------
// Krein model
// ---------------------------------------------------------------------------

/// Block dimensions of the model space.
#[derive(Debug, Clone, Serialize)]
pub struct KreinBlockDims {
    pub model: usize,
    pub functions: usize,
    pub null_integral: usize,
    pub orthocomplement: usize,
}

/// The full model: basis, distinguished null function `h`, abstract `v0`.
/// Model vectors are coefficient vectors of length `N + 1` with the `v0`
/// amplitude in slot 0 and basis-function coefficients after it.
#[derive(Debug, Clone)]
pub struct KreinModel {
    basis: TestBasis,
    /// Coefficients of `h` in the function basis; `int h = 1`.
    h: DVector<f64>,
    h_norm: f64,
}

impl KreinModel {
    /// Construct `h` from the first and last basis functions: normalize
    /// both to unit integral and pick the real root of the quadratic
    /// making the combination null. Fails when the two bumps do not
    /// violate Cauchy-Schwarz under the indefinite kernel.
    pub fn build(basis: TestBasis) -> Result<KreinModel, KreinError> {
        let n = basis.n_functions();
        if n < 2 {
            return Err(KreinError::Dimension("need at least two basis functions".into()));
        }
        let mut b1 = DVector::zeros(n);
        b1[0] = 1.0 / basis.integrals[0];
        let mut b2 = DVector::zeros(n);
        b2[n - 1] = 1.0 / basis.integrals[n - 1];
        let inner = |x: &DVector<f64>, y: &DVector<f64>| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += x[i] * basis.gram[(i, j)] * y[j];
                }
            }
            acc
        };
        let u = inner(&b1, &b1);
        let v = inner(&b1, &b2);
        let t = inner(&b2, &b2);
        // <h(beta), h(beta)> = u + 2 beta (v - u) + beta^2 (u - 2v + t).
        let disc = v * v - u * t;
        if disc < 0.0 {
            return Err(KreinError::NoNullCombination { discriminant: disc });
        }
        let a2 = u - 2.0 * v + t;
        let beta = if a2.abs() < 1e-14 {
            // Degenerate quadratic: linear root.
            u / (2.0 * (u - v))
        } else {
            ((u - v) + disc.sqrt()) / a2
        };
        let h = &b1 * (1.0 - beta) + &b2 * beta;
        Self::with_null_vector(basis, h)
    }

    /// Adopt a caller-supplied `h` (coefficients in the function basis).
    /// The integral is rescaled to one; nullity is checked lazily by
    /// [`KreinModel::metric_operator`], so a non-null `h` is accepted here
    /// to allow exercising that error path.
    pub fn with_null_vector(basis: TestBasis, h: DVector<f64>) -> Result<KreinModel, KreinError> {
        let n = basis.n_functions();
        if h.len() != n {
            return Err(KreinError::Dimension(format!(
                "h has {} coefficients for {} basis functions",
                h.len(),
                n
            )));
        }
        let integral: f64 = (0..n).map(|j| h[j] * basis.integrals[j]).sum();
        if integral.abs() < 1e-12 {
            return Err(KreinError::Dimension("h must have nonzero integral".into()));
        }
        let h = h / integral;
        let mut model = KreinModel { basis, h, h_norm: 0.0 };
        let hc = model.h_complex();
        model.h_norm = model.basis.kernel_inner(&hc, &hc).re;
        // The positive Gram must be positive semidefinite.
        let gram = model.positive_gram(FormSign::Plus);
        let scale = gram.amax().max(1.0);
        let min_eigenvalue = gram.symmetric_eigen().eigenvalues.min();
        if min_eigenvalue < -1e-12 * scale {
            return Err(KreinError::NotPositive { min_eigenvalue });
        }
        Ok(model)
    }

    pub fn basis(&self) -> &TestBasis {
        &self.basis
    }

    /// Coefficients of `h` in the function basis.
    pub fn h_coefficients(&self) -> &DVector<f64> {
        &self.h
    }

    /// `<h, h>` as realized numerically.
    pub fn h_null_defect(&self) -> f64 {
        self.h_norm
    }

    pub fn dims(&self) -> KreinBlockDims {
        let n = self.basis.n_functions();
        KreinBlockDims {
            model: n + 1,
            functions: n,
            null_integral: n - 1,
            orthocomplement: n - 1,
        }
    }

    fn h_complex(&self) -> DVector<Complex64> {
        self.h.map(|x| Complex64::new(x, 0.0))
    }

    /// Lift a function coefficient vector to a model vector.
    pub fn lift(&self, f: &DVector<Complex64>) -> DVector<Complex64> {
        let n = self.basis.n_functions();
        let mut out = DVector::zeros(n + 1);
        for j in 0..n {
            out[j + 1] = f[j];
        }
        out
    }

    pub fn v0_vector(&self) -> DVector<Complex64> {
        let mut out = DVector::zeros(self.basis.n_functions() + 1);
        out[0] = Complex64::new(1.0, 0.0);
        out
    }

    pub fn h_vector(&self) -> DVector<Complex64> {
        self.lift(&self.h_complex())
    }

    fn split(&self, model_vec: &DVector<Complex64>) -> (Complex64, DVector<Complex64>) {
        let n = self.basis.n_functions();
        (model_vec[0], DVector::from_fn(n, |j, _| model_vec[j + 1]))
    }

    /// Split a function into its null-integral part and its `h` component:
    /// `f = f0 + c h` with `c = int f`.
    pub fn decompose(&self, f: &DVector<Complex64>) -> (DVector<Complex64>, Complex64) {
        let c = self.basis.integral(f);
        let f0 = f - self.h_complex() * c;
        (f0, c)
    }

    /// Indefinite form on model vectors for the requested sector. The
    /// function-function block carries the sector sign; the `v0` pairings
    /// `<v0, f> = int f` and `<v0, v0> = 0` are sector-independent.
    pub fn indefinite_form_signed(
        &self,
        f: &DVector<Complex64>,
        g: &DVector<Complex64>,
        sign: FormSign,
    ) -> Complex64 {
        let (a, fun_f) = self.split(f);
        let (b, fun_g) = self.split(g);
        let mut acc = a.conj() * self.basis.integral(&fun_g);
        acc += b * self.basis.integral(&fun_f).conj();
        acc += sign.factor() * self.sector_function_inner(&fun_f, &fun_g, FormSign::Plus);
        acc
    }

    /// Base-sector indefinite form, written through the decomposition
    /// `<f0,g0> + conj(int f) <h,g> + (int g) <f,h>`. With `<h,h> = 0`
    /// this equals the plain kernel pairing; hermiticity is a tested
    /// property, not an enforced symmetrization.
    pub fn indefinite_form(&self, f: &DVector<Complex64>, g: &DVector<Complex64>) -> Complex64 {
        let (a, fun_f) = self.split(f);
        let (b, fun_g) = self.split(g);
        let (f0, cf) = self.decompose(&fun_f);
        let (g0, cg) = self.decompose(&fun_g);
        let h = self.h_complex();
        let mut acc = self.basis.kernel_inner(&f0, &g0);
        acc += cf.conj() * self.basis.kernel_inner(&h, &fun_g);
        acc += cg * self.basis.kernel_inner(&fun_f, &h);
        acc += a.conj() * self.basis.integral(&fun_g);
        acc += b * self.basis.integral(&fun_f).conj();
        acc
    }

    fn sector_function_inner(
        &self,
        f: &DVector<Complex64>,
        g: &DVector<Complex64>,
        sign: FormSign,
    ) -> Complex64 {
        sign.factor() * self.basis.kernel_inner(f, g)
    }

    /// Positive form on model vectors. In each sector the first term is
    /// the sector's own `<f0, g0>` with a sector sign in front, so the
    /// flipped-sign field flips only that term relative to its kernel;
    /// composing the two flips leaves the same positive Gram, which is why
    /// one majorant topology dominates both fields.
    pub fn positive_form(
        &self,
        f: &DVector<Complex64>,
        g: &DVector<Complex64>,
        sign: FormSign,
    ) -> Complex64 {
        let (a, fun_f) = self.split(f);
        let (b, fun_g) = self.split(g);
        let (f0, cf) = self.decompose(&fun_f);
        let (g0, cg) = self.decompose(&fun_g);
        let h = self.h_complex();
        let fh = self.sector_function_inner(&fun_f, &h, sign);
        let hg = self.sector_function_inner(&h, &fun_g, sign);
        let hf0 = self.sector_function_inner(&h, &f0, sign);
        let hg0 = self.sector_function_inner(&h, &g0, sign);
        let mut acc = sign.factor() * self.sector_function_inner(&f0, &g0, sign);
        acc += fh * hg;
        acc += cf.conj() * cg;
        // v0 block: (v0, v0) = 1 and (v0, g) = <h, g0> from the
        // orthocomplement structure.
        acc += a.conj() * b;
        acc += a.conj() * hg0;
        acc += b * hf0.conj();
        acc
    }

    /// Positive Gram over `{v0, f_1, .., f_N}` for the JSON dump and the
    /// construction-time positivity check.
    pub fn positive_gram(&self, sign: FormSign) -> DMatrix<f64> {
        let n = self.basis.n_functions();
        let mut gram = DMatrix::zeros(n + 1, n + 1);
        let mut vectors = vec![self.v0_vector()];
        for j in 0..n {
            let mut f = DVector::zeros(n);
            f[j] = Complex64::new(1.0, 0.0);
            vectors.push(self.lift(&f));
        }
        for (i, vi) in vectors.iter().enumerate() {
            for (j, vj) in vectors.iter().enumerate() {
                gram[(i, j)] = self.positive_form(vi, vj, sign).re;
            }
        }
        gram
    }

    /// Indefinite Gram over `{v0, f_1, .., f_N}`.
    pub fn indefinite_gram(&self) -> DMatrix<f64> {
        let n = self.basis.n_functions();
        let mut gram = DMatrix::zeros(n + 1, n + 1);
        for j in 0..n {
            gram[(0, j + 1)] = self.basis.integrals[j];
            gram[(j + 1, 0)] = self.basis.integrals[j];
        }
        for i in 0..n {
            for j in 0..n {
                gram[(i + 1, j + 1)] = self.basis.gram[(i, j)];
            }
        }
        gram
    }

    /// Metric operator on model vectors: swaps `h` and `v0`, acts as the
    /// identity on the orthocomplement block, and converts the positive
    /// form into the indefinite one. Errors when `h` is not null.
    pub fn metric_operator(&self) -> Result<DMatrix<f64>, KreinError> {
        let scale = self.basis.gram.amax().max(1.0);
        if self.h_norm.abs() > tolerances::STRUCTURE_IDENTITY * scale {
            return Err(KreinError::NotNull { value: self.h_norm });
        }
        let n = self.basis.n_functions();
        let mut eta = DMatrix::zeros(n + 1, n + 1);
        // Column for v0: image is h.
        for j in 0..n {
            eta[(j + 1, 0)] = self.h[j];
        }
        // Columns for basis functions: f_j keeps itself plus corrections
        // (gamma_j - beta_j) (v0 - h) with gamma_j = int f_j and
        // beta_j = <h, f_j0>.
        let h = self.h_complex();
        for j in 0..n {
            let mut f = DVector::zeros(n);
            f[j] = Complex64::new(1.0, 0.0);
            let (f0, gamma) = self.decompose(&f);
            let beta = self.basis.kernel_inner(&h, &f0).re;
            let shift = gamma.re - beta;
            eta[(j + 1, j + 1)] = 1.0;
            eta[(0, j + 1)] += shift;
            for i in 0..n {
                eta[(i + 1, j + 1)] -= shift * self.h[i];
            }
        }
        Ok(eta)
    }

    /// Orthocomplement representative `f0 - <h, f0> v0` of a null-integral
    /// function.
    pub fn orthocomplement_vector(&self, f0: &DVector<Complex64>) -> DVector<Complex64> {
        let h = self.h_complex();
        let mut out = self.lift(f0);
        out[0] = -self.basis.kernel_inner(&h, f0);
        out
    }

    /// Basis of the null ideal: null-integral functions orthogonal to `h`
    /// under the kernel on which the restricted Gram is (near) zero.
    /// `threshold` is relative to the largest restricted eigenvalue.
    pub fn null_ideal(&self, threshold: f64) -> NullIdeal {
        let n = self.basis.n_functions();
        let mut constraints = DMatrix::zeros(2, n);
        for j in 0..n {
            constraints[(0, j)] = self.basis.integrals[j];
            let mut f = DVector::zeros(n);
            f[j] = Complex64::new(1.0, 0.0);
            constraints[(1, j)] = self.basis.kernel_inner(&self.h_complex(), &f).re;
        }
        let subspace = null_space(&constraints);
        if subspace.ncols() == 0 {
            return NullIdeal { members: Vec::new(), subspace_dim: 0, quotient_dim: 0 };
        }
        let restricted = subspace.transpose() * &self.basis.gram * &subspace;
        let restricted = (&restricted + restricted.transpose()) * 0.5;
        let eig = restricted.symmetric_eigen();
        let max = eig.eigenvalues.amax().max(1e-300);
        let mut members = Vec::new();
        for k in 0..eig.eigenvalues.len() {
            if eig.eigenvalues[k].abs() <= threshold * max {
                let coeffs = &subspace * eig.eigenvectors.column(k);
                members.push(DVector::from_fn(n, |j, _| Complex64::new(coeffs[j], 0.0)));
            }
        }
        let subspace_dim = subspace.ncols();
        let quotient_dim = subspace_dim - members.len();
        NullIdeal { members, subspace_dim, quotient_dim }
    }

    /// Serializable dump of the model.
    pub fn dump(&self) -> KreinModelDump {
        KreinModelDump {
            schema: 1,
            half_width: self.basis.half_width,
            kernel_epsilon: self.basis.epsilon,
            quadrature_points: self.basis.grid.len(),
            dims: self.dims(),
            integrals: self.basis.integrals.clone(),
            h_coefficients: self.h.iter().copied().collect(),
            indefinite_gram: matrix_rows(&self.indefinite_gram()),
            positive_gram: matrix_rows(&self.positive_gram(FormSign::Plus)),
            metric_operator: self.metric_operator().ok().map(|m| matrix_rows(&m)),
        }
    }
}

/// Null ideal basis and the dimensions around it.
#[derive(Debug)]
pub struct NullIdeal {
    pub members: Vec<DVector<Complex64>>,
    /// Dimension of the constrained subspace the Gram was restricted to.
    pub subspace_dim: usize,
    /// Dimension of the quotient by the ideal.
    pub quotient_dim: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct KreinModelDump {
    pub schema: u32,
    pub half_width: f64,
    pub kernel_epsilon: f64,
    pub quadrature_points: usize,
    pub dims: KreinBlockDims,
    pub integrals: Vec<f64>,
    pub h_coefficients: Vec<f64>,
    pub indefinite_gram: Vec<Vec<f64>>,
    pub positive_gram: Vec<Vec<f64>>,
    pub metric_operator: Option<Vec<Vec<f64>>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}
