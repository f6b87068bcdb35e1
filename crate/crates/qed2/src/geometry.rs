//! Conformal-gauge differential geometry in two dimensions.
//!
//! The metric is `g_{mn} = e^{2 sigma} eta_{mn}` with `eta = diag(+1,-1)`.
//! Everything here is a closed-form consequence of `sigma` and its exact
//! partial derivatives: zweibein, spin connection, curvature, Christoffel
//! symbols, geodesics, the world function (half the signed squared geodesic
//! distance), the Van Vleck determinant, and Riemann normal coordinates.
//!
//! Geodesic two-point problems are solved by damped Newton iteration on a
//! discretized trajectory (second-order stencils), then Richardson-refined
//! on a doubled grid. The conformal factor being constant is detected
//! syntactically and short-circuits to the exact Minkowski formulas.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;

/// A spacetime point in chart coordinates `(x0, x1)`, `x0` timelike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x0: f64,
    pub x1: f64,
}

impl Point {
    pub fn new(x0: f64, x1: f64) -> Point {
        Point { x0, x1 }
    }

    pub fn vec(self) -> Vector2<f64> {
        Vector2::new(self.x0, self.x1)
    }

    pub fn from_vec(v: Vector2<f64>) -> Point {
        Point { x0: v[0], x1: v[1] }
    }

    pub fn is_finite(self) -> bool {
        self.x0.is_finite() && self.x1.is_finite()
    }
}

impl fmt::Display for Point {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(out, "({}, {})", self.x0, self.x1)
    }
}

/// Minkowski pairing of chart 2-vectors: `a0 b0 - a1 b1`.
pub fn eta(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a[0] * b[0] - a[1] * b[1]
}

/// Rectangular coordinate bounds of the chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x0_min: f64,
    pub x0_max: f64,
    pub x1_min: f64,
    pub x1_max: f64,
}

impl Domain {
    pub fn new(x0_min: f64, x0_max: f64, x1_min: f64, x1_max: f64) -> Domain {
        Domain { x0_min, x0_max, x1_min, x1_max }
    }

    /// A generous default for desk-scale experiments around the origin.
    pub fn symmetric(half_width: f64) -> Domain {
        Domain::new(-half_width, half_width, -half_width, half_width)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.is_finite()
            && p.x0 >= self.x0_min
            && p.x0 <= self.x0_max
            && p.x1 >= self.x1_min
            && p.x1 <= self.x1_max
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("point ({x0}, {x1}) outside the chart domain")]
    OutsideDomain { x0: f64, x1: f64 },
    #[error("geodesic boundary-value solver did not converge (residual {residual:.3e})")]
    SolverDiverged { residual: f64 },
    #[error("geodesic shooting failed to reach the target (miss {miss:.3e})")]
    ShootingFailed { miss: f64 },
    #[error("malformed sigma grid: {message}")]
    Grid { message: String },
    #[error("point ({x0}, {x1}) outside the coefficient patch around the base point")]
    OutsidePatch { x0: f64, x1: f64 },
}

/// Curvature data at a point. `scalar` follows the first-principles
/// convention obtained by contracting the Christoffel pipeline of
/// `e^{2 sigma} eta`; `scalar_contracted` re-derives it from the stored
/// Ricci components so the two can be compared.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvatureReport {
    /// Mixed component R^0_{101} = (d0^2 - d1^2) sigma.
    pub riemann_0101_mixed: f64,
    /// Fully lowered R_{0101} = e^{2 sigma} (d0^2 - d1^2) sigma.
    pub riemann_0101: f64,
    /// Ricci R_{00} = (d1^2 - d0^2) sigma.
    pub ricci_00: f64,
    /// Ricci R_{11} = (d0^2 - d1^2) sigma.
    pub ricci_11: f64,
    /// Scalar curvature R = -2 e^{-2 sigma} (d0^2 - d1^2) sigma.
    pub scalar: f64,
    /// g^{ij} R_{ij} assembled from `ricci_00`, `ricci_11`.
    pub scalar_contracted: f64,
}

/// A symmetric (or deliberately unsymmetric) function of point pairs.
#[derive(Clone)]
pub struct Biscalar {
    symmetric: bool,
    f: Arc<dyn Fn(Point, Point) -> Result<Complex64, GeometryError> + Send + Sync>,
}

impl Biscalar {
    pub fn new(
        symmetric: bool,
        f: impl Fn(Point, Point) -> Result<Complex64, GeometryError> + Send + Sync + 'static,
    ) -> Biscalar {
        Biscalar { symmetric, f: Arc::new(f) }
    }

    pub fn value(&self, x: Point, xp: Point) -> Result<Complex64, GeometryError> {
        (self.f)(x, xp)
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    /// Largest |f(x,x') - f(x',x)| over the sample pairs.
    pub fn symmetry_defect(&self, pairs: &[(Point, Point)]) -> Result<f64, GeometryError> {
        let mut worst = 0.0f64;
        for &(x, xp) in pairs {
            let a = self.value(x, xp)?;
            let b = self.value(xp, x)?;
            worst = worst.max((a - b).norm());
        }
        Ok(worst)
    }
}

impl fmt::Debug for Biscalar {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(out, "Biscalar {{ symmetric: {} }}", self.symmetric)
    }
}

/// Sampled conformal factor on a uniform rectangular grid, interpolated by
/// tensor-product degree-4 Lagrange polynomials (5x5 windows). Derivatives
/// come from differentiating the interpolant, so they are consistent with
/// fourth-order finite-difference stencils in the interior.
#[derive(Debug, Clone)]
pub struct SigmaGrid {
    x0_min: f64,
    x0_max: f64,
    x1_min: f64,
    x1_max: f64,
    n0: usize,
    n1: usize,
    /// Row-major: `samples[i * n1 + j]` is sigma at `(x0_i, x1_j)`.
    samples: Vec<f64>,
}

impl SigmaGrid {
    pub fn new(
        x0_min: f64,
        x0_max: f64,
        x1_min: f64,
        x1_max: f64,
        n0: usize,
        n1: usize,
        samples: Vec<f64>,
    ) -> Result<SigmaGrid, GeometryError> {
        if n0 < 5 || n1 < 5 {
            return Err(GeometryError::Grid {
                message: format!("need at least 5 samples per axis, got {n0} x {n1}"),
            });
        }
        if x0_max <= x0_min || x1_max <= x1_min {
            return Err(GeometryError::Grid { message: "empty coordinate range".into() });
        }
        if samples.len() != n0 * n1 {
            return Err(GeometryError::Grid {
                message: format!("expected {} samples, got {}", n0 * n1, samples.len()),
            });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(GeometryError::Grid { message: "non-finite sample".into() });
        }
        Ok(SigmaGrid { x0_min, x0_max, x1_min, x1_max, n0, n1, samples })
    }

    /// Parse the plain-text format: a header line
    /// `x0_min x0_max x1_min x1_max n0 n1` followed by `n0 * n1` samples in
    /// row-major order (rows indexed by x0). Whitespace of any kind
    /// separates tokens.
    pub fn parse(text: &str) -> Result<SigmaGrid, GeometryError> {
        let mut tokens = text.split_whitespace();
        let mut next_f64 = |what: &str| -> Result<f64, GeometryError> {
            let tok = tokens.next().ok_or_else(|| GeometryError::Grid {
                message: format!("missing {what}"),
            })?;
            tok.parse().map_err(|_| GeometryError::Grid {
                message: format!("bad {what}: `{tok}`"),
            })
        };
        let x0_min = next_f64("x0_min")?;
        let x0_max = next_f64("x0_max")?;
        let x1_min = next_f64("x1_min")?;
        let x1_max = next_f64("x1_max")?;
        let n0f = next_f64("n0")?;
        let n1f = next_f64("n1")?;
        if n0f.fract() != 0.0 || n1f.fract() != 0.0 || n0f < 0.0 || n1f < 0.0 {
            return Err(GeometryError::Grid { message: "n0/n1 must be nonnegative integers".into() });
        }
        let (n0, n1) = (n0f as usize, n1f as usize);
        let mut samples = Vec::with_capacity(n0 * n1);
        for tok in tokens {
            let v: f64 = tok.parse().map_err(|_| GeometryError::Grid {
                message: format!("bad sample `{tok}`"),
            })?;
            samples.push(v);
        }
        SigmaGrid::new(x0_min, x0_max, x1_min, x1_max, n0, n1, samples)
    }

    pub fn domain(&self) -> Domain {
        Domain::new(self.x0_min, self.x0_max, self.x1_min, self.x1_max)
    }

    fn step0(&self) -> f64 {
        (self.x0_max - self.x0_min) / (self.n0 - 1) as f64
    }

    fn step1(&self) -> f64 {
        (self.x1_max - self.x1_min) / (self.n1 - 1) as f64
    }

    /// Partial derivative d^{i+j} sigma / dx0^i dx1^j of the local
    /// interpolant. Orders above 4 per axis are identically zero for a
    /// degree-4 interpolant and rejected by debug assertion.
    fn partial(&self, i: usize, j: usize, x0: f64, x1: f64) -> f64 {
        debug_assert!(i <= 4 && j <= 4, "grid interpolant supports order <= 4 per axis");
        let h0 = self.step0();
        let h1 = self.step1();
        // 5-node window starting index, clamped inside the grid.
        let win = |x: f64, min: f64, h: f64, n: usize| -> usize {
            let center = ((x - min) / h).round() as isize;
            (center - 2).clamp(0, n as isize - 5) as usize
        };
        let i0 = win(x0, self.x0_min, h0, self.n0);
        let j0 = win(x1, self.x1_min, h1, self.n1);
        let w0 = lagrange5_weights(x0 - (self.x0_min + i0 as f64 * h0), h0, i);
        let w1 = lagrange5_weights(x1 - (self.x1_min + j0 as f64 * h1), h1, j);
        let mut acc = 0.0;
        for a in 0..5 {
            let row = (i0 + a) * self.n1 + j0;
            let mut partial_row = 0.0;
            for b in 0..5 {
                partial_row += w1[b] * self.samples[row + b];
            }
            acc += w0[a] * partial_row;
        }
        acc
    }

    fn constant_value(&self) -> Option<f64> {
        let first = self.samples[0];
        self.samples.iter().all(|&s| s == first).then_some(first)
    }
}

/// Weights of the derivative of order `order` of the 5-node Lagrange basis
/// on nodes `{0, h, 2h, 3h, 4h}`, evaluated at offset `t` from node 0.
fn lagrange5_weights(t: f64, h: f64, order: usize) -> [f64; 5] {
    let nodes = [0.0, h, 2.0 * h, 3.0 * h, 4.0 * h];
    let mut weights = [0.0; 5];
    for (i, wi) in weights.iter_mut().enumerate() {
        // Build the basis polynomial for node i as coefficients in t.
        let mut coeffs = [0.0f64; 6];
        coeffs[0] = 1.0;
        let mut degree = 0usize;
        for (jj, &nj) in nodes.iter().enumerate() {
            if jj == i {
                continue;
            }
            let scale = nodes[i] - nj;
            // coeffs *= (t - nj) / scale
            let mut next = [0.0f64; 6];
            for d in 0..=degree {
                next[d + 1] += coeffs[d] / scale;
                next[d] += coeffs[d] * (-nj) / scale;
            }
            coeffs = next;
            degree += 1;
        }
        // Differentiate `order` times.
        for _ in 0..order {
            for d in 0..5 {
                coeffs[d] = coeffs[d + 1] * (d as f64 + 1.0);
            }
            coeffs[5] = 0.0;
        }
        // Horner evaluation at t.
        let mut v = 0.0;
        for d in (0..6).rev() {
            v = v * t + coeffs[d];
        }
        *wi = v;
    }
    weights
}

enum SigmaField {
    /// Expression tree with precomputed exact partials; `partials[i][j]`
    /// holds d^{i+j} sigma / dx0^i dx1^j for i + j <= 4.
    Expression { partials: Vec<Vec<Expr>> },
    Grid(SigmaGrid),
}

/// The conformal geometry: `sigma` plus chart bounds.
pub struct Geometry {
    field: SigmaField,
    domain: Domain,
    /// `Some(c)` when sigma is syntactically the constant c; enables exact
    /// Minkowski short cuts (straight geodesics, closed-form world function).
    constant_sigma: Option<f64>,
    /// Interior node count of the coarse geodesic discretization; the fine
    /// pass uses `2k + 1`.
    bvp_nodes: usize,
}

pub const DEFAULT_BVP_NODES: usize = 47;

/// Fixed RK4 step count for the shooting (normal-coordinate) integrator.
const SHOOTING_STEPS: usize = 96;

impl Geometry {
    pub fn from_expression(sigma: Expr, domain: Domain) -> Geometry {
        let constant_sigma = if sigma.is_constant() {
            Some(sigma.eval(0.0, 0.0))
        } else {
            None
        };
        let mut partials: Vec<Vec<Expr>> = Vec::with_capacity(5);
        for i in 0..=4usize {
            let mut row = Vec::with_capacity(5 - i);
            for j in 0..=(4 - i) {
                row.push(sigma.partial(i, j));
            }
            partials.push(row);
        }
        Geometry {
            field: SigmaField::Expression { partials },
            domain,
            constant_sigma,
            bvp_nodes: DEFAULT_BVP_NODES,
        }
    }

    pub fn from_expr_str(src: &str, domain: Domain) -> Result<Geometry, crate::expr::ParseError> {
        Ok(Geometry::from_expression(Expr::parse(src)?, domain))
    }

    pub fn from_grid(grid: SigmaGrid) -> Geometry {
        let domain = grid.domain();
        let constant_sigma = grid.constant_value();
        Geometry {
            field: SigmaField::Grid(grid),
            domain,
            constant_sigma,
            bvp_nodes: DEFAULT_BVP_NODES,
        }
    }

    /// Flat Minkowski chart on a symmetric domain.
    pub fn minkowski(half_width: f64) -> Geometry {
        Geometry::from_expression(Expr::Const(0.0), Domain::symmetric(half_width))
    }

    /// Override the geodesic discretization (interior nodes of the coarse
    /// pass). Intended for the coarse patch pipelines; tests of the public
    /// contract use the default.
    pub fn with_bvp_nodes(mut self, nodes: usize) -> Geometry {
        assert!(nodes >= 5, "need at least 5 interior nodes");
        self.bvp_nodes = nodes;
        self
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// `Some(c)` when sigma is the constant `c` (so the chart is globally
    /// Minkowski up to the fixed scale `e^{2c}`).
    pub fn constant_sigma(&self) -> Option<f64> {
        self.constant_sigma
    }

    pub fn is_flat(&self) -> bool {
        self.constant_sigma == Some(0.0)
    }

    pub fn check_point(&self, p: Point) -> Result<(), GeometryError> {
        if self.domain.contains(p) {
            Ok(())
        } else {
            Err(GeometryError::OutsideDomain { x0: p.x0, x1: p.x1 })
        }
    }

    /// d^{i+j} sigma / dx0^i dx1^j at `p`, exact for expression mode.
    pub fn sigma_partial(&self, p: Point, i: usize, j: usize) -> f64 {
        match &self.field {
            SigmaField::Expression { partials } => {
                debug_assert!(i + j <= 4, "partials precomputed through total order 4");
                partials[i][j].eval(p.x0, p.x1)
            }
            SigmaField::Grid(grid) => grid.partial(i, j, p.x0, p.x1),
        }
    }

    pub fn sigma(&self, p: Point) -> f64 {
        self.sigma_partial(p, 0, 0)
    }

    /// Metric g_{mn} = e^{2 sigma} diag(+1,-1).
    pub fn metric(&self, p: Point) -> Matrix2<f64> {
        let w = (2.0 * self.sigma(p)).exp();
        Matrix2::new(w, 0.0, 0.0, -w)
    }

    /// Inverse metric g^{mn} = e^{-2 sigma} diag(+1,-1).
    pub fn inverse_metric(&self, p: Point) -> Matrix2<f64> {
        let w = (-2.0 * self.sigma(p)).exp();
        Matrix2::new(w, 0.0, 0.0, -w)
    }

    /// sqrt|det g| = e^{2 sigma}.
    pub fn sqrt_det_g(&self, p: Point) -> f64 {
        (2.0 * self.sigma(p)).exp()
    }

    /// Frame pair `(e_m^a, E_a^m)`: `e = e^sigma I`, `E = e^{-sigma} I`.
    pub fn zweibein_at(&self, p: Point) -> Result<(Matrix2<f64>, Matrix2<f64>), GeometryError> {
        self.check_point(p)?;
        let s = self.sigma(p).exp();
        Ok((Matrix2::identity() * s, Matrix2::identity() / s))
    }

    /// Largest deviation across the five frame relations (frame times
    /// inverse both ways, metric assembly both ways, frame contraction with
    /// one raised index).
    pub fn zweibein_defect(&self, p: Point) -> Result<f64, GeometryError> {
        let (e, big_e) = self.zweibein_at(p)?;
        let g = self.metric(p);
        let ginv = self.inverse_metric(p);
        let eta_m = Matrix2::new(1.0, 0.0, 0.0, -1.0);
        let mut worst = 0.0f64;
        let mut track = |m: Matrix2<f64>, target: Matrix2<f64>| {
            worst = worst.max((m - target).abs().max());
        };
        track(e * big_e, Matrix2::identity());
        track(big_e * e, Matrix2::identity());
        track(e * eta_m * e.transpose(), g);
        track(big_e.transpose() * g * big_e, eta_m);
        // e^{m a} e_m^b with the first index raised by g^{mn}.
        track((ginv * e).transpose() * e, eta_m);
        Ok(worst)
    }

    /// Spin connection components `(w_0, w_1)` with `w_m = w_{m 0 1}`:
    /// `w_0 = -d1 sigma`, `w_1 = -d0 sigma`.
    pub fn spin_connection_at(&self, p: Point) -> Result<(f64, f64), GeometryError> {
        self.check_point(p)?;
        Ok((-self.sigma_partial(p, 0, 1), -self.sigma_partial(p, 1, 0)))
    }

    pub fn curvature_at(&self, p: Point) -> Result<CurvatureReport, GeometryError> {
        self.check_point(p)?;
        let box_sigma = self.sigma_partial(p, 2, 0) - self.sigma_partial(p, 0, 2);
        let w = (2.0 * self.sigma(p)).exp();
        let ricci_00 = -box_sigma;
        let ricci_11 = box_sigma;
        // g^{00} R_00 + g^{11} R_11 with g^{mn} = e^{-2s} diag(+1,-1).
        let scalar_contracted = (ricci_00 - ricci_11) / w;
        Ok(CurvatureReport {
            riemann_0101_mixed: box_sigma,
            riemann_0101: w * box_sigma,
            ricci_00,
            ricci_11,
            scalar: -2.0 * box_sigma / w,
            scalar_contracted,
        })
    }

    /// Christoffel symbols as two matrices `G[l][m][n] = Gamma^l_{mn}`.
    pub fn christoffel(&self, p: Point) -> [[[f64; 2]; 2]; 2] {
        let s0 = self.sigma_partial(p, 1, 0);
        let s1 = self.sigma_partial(p, 0, 1);
        [
            [[s0, s1], [s1, s0]],
            [[s1, s0], [s0, s1]],
        ]
    }

    /// Geodesic acceleration `-Gamma^l_{mn} v^m v^n`.
    fn geodesic_accel(&self, p: Point, v: Vector2<f64>) -> Vector2<f64> {
        let s0 = self.sigma_partial(p, 1, 0);
        let s1 = self.sigma_partial(p, 0, 1);
        let q = v[0] * v[0] + v[1] * v[1];
        let c = 2.0 * v[0] * v[1];
        Vector2::new(-(s0 * q + s1 * c), -(s1 * q + s0 * c))
    }

    /// d(accel)/dv at fixed p.
    fn geodesic_accel_dv(&self, p: Point, v: Vector2<f64>) -> Matrix2<f64> {
        let s0 = self.sigma_partial(p, 1, 0);
        let s1 = self.sigma_partial(p, 0, 1);
        -2.0 * Matrix2::new(
            s0 * v[0] + s1 * v[1],
            s1 * v[0] + s0 * v[1],
            s1 * v[0] + s0 * v[1],
            s0 * v[0] + s1 * v[1],
        )
    }

    /// d(accel)/dp at fixed v.
    fn geodesic_accel_dp(&self, p: Point, v: Vector2<f64>) -> Matrix2<f64> {
        let s00 = self.sigma_partial(p, 2, 0);
        let s01 = self.sigma_partial(p, 1, 1);
        let s11 = self.sigma_partial(p, 0, 2);
        let q = v[0] * v[0] + v[1] * v[1];
        let c = 2.0 * v[0] * v[1];
        -Matrix2::new(
            s00 * q + s01 * c,
            s01 * q + s11 * c,
            s01 * q + s00 * c,
            s11 * q + s01 * c,
        )
    }

    /// Conserved energy `E = (1/2) e^{2 sigma} eta(v, v)`; along an affine
    /// [0,1] geodesic this equals the world function of its endpoints.
    pub fn kinetic_energy(&self, p: Point, v: Vector2<f64>) -> f64 {
        0.5 * (2.0 * self.sigma(p)).exp() * eta(v, v)
    }

    // ----- geodesic boundary-value problem -------------------------------

    /// Solve the affine-[0,1] geodesic from `x` to `xp`. Runs the damped
    /// Newton collocation at the configured resolution and at double
    /// resolution, Richardson-extrapolating the energy; the returned path
    /// is the fine one.
    pub fn geodesic(&self, x: Point, xp: Point) -> Result<GeodesicPath, GeometryError> {
        self.geodesic_with_resolution(x, xp, self.bvp_nodes)
    }

    /// `geodesic` at an explicit coarse interior-node count `k`. The fine
    /// path returned has `2k + 3` points including both endpoints.
    pub(crate) fn geodesic_with_resolution(
        &self,
        x: Point,
        xp: Point,
        k: usize,
    ) -> Result<GeodesicPath, GeometryError> {
        self.check_point(x)?;
        self.check_point(xp)?;
        if let Some(c) = self.constant_sigma {
            return Ok(GeodesicPath::straight(x, xp, c, k * 2 + 1));
        }
        let coarse = self.solve_bvp(x, xp, k, None)?;
        let fine_nodes = 2 * k + 1;
        let fine = self.solve_bvp(x, xp, fine_nodes, Some(&coarse))?;
        let energy = (4.0 * self.path_energy(&fine) - self.path_energy(&coarse)) / 3.0;
        let (v0c, v1c) = self.path_end_velocities(&coarse);
        let (v0f, v1f) = self.path_end_velocities(&fine);
        Ok(GeodesicPath {
            points: fine,
            energy,
            v_start: (4.0 * v0f - v0c) / 3.0,
            v_end: (4.0 * v1f - v1c) / 3.0,
        })
    }

    /// One collocation solve with `k` interior nodes. `warm` optionally
    /// seeds the iteration with a previously solved (coarser) path.
    fn solve_bvp(
        &self,
        x: Point,
        xp: Point,
        k: usize,
        warm: Option<&[Point]>,
    ) -> Result<Vec<Point>, GeometryError> {
        let n = k + 2;
        let h = 1.0 / (k + 1) as f64;
        let mut path: Vec<Point> = match warm {
            Some(prev) => resample_path(prev, n),
            None => (0..n)
                .map(|i| {
                    let t = i as f64 * h;
                    Point::new(x.x0 + t * (xp.x0 - x.x0), x.x1 + t * (xp.x1 - x.x1))
                })
                .collect(),
        };
        path[0] = x;
        path[n - 1] = xp;

        let scale = 1.0 + (xp.x0 - x.x0).abs() + (xp.x1 - x.x1).abs();
        let tol = 1e-13 * scale;
        let mut residual = self.bvp_residual(&path, h);
        let mut res_norm = residual.amax();
        let mut stalls = 0;
        for _ in 0..60 {
            if res_norm < tol {
                break;
            }
            let jac = self.bvp_jacobian(&path, h);
            let delta = jac.lu().solve(&residual).ok_or(GeometryError::SolverDiverged {
                residual: res_norm,
            })?;
            // Backtracking on the squared residual norm.
            let mut lambda = 1.0;
            let base = residual.norm_squared();
            let mut accepted = false;
            while lambda >= 1.0 / 64.0 {
                let mut trial = path.clone();
                for i in 1..n - 1 {
                    trial[i].x0 -= lambda * delta[2 * (i - 1)];
                    trial[i].x1 -= lambda * delta[2 * (i - 1) + 1];
                }
                let trial_res = self.bvp_residual(&trial, h);
                if trial_res.norm_squared() < base * (1.0 - 1e-4 * lambda) || trial_res.amax() < tol
                {
                    path = trial;
                    residual = trial_res;
                    res_norm = residual.amax();
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                stalls += 1;
                if stalls >= 2 {
                    return Err(GeometryError::SolverDiverged { residual: res_norm });
                }
            }
        }
        if res_norm >= tol * 10.0 {
            return Err(GeometryError::SolverDiverged { residual: res_norm });
        }
        Ok(path)
    }

    /// Scaled residual: (y_{k+1} - 2 y_k + y_{k-1}) + h^2 Gamma(y_k)(v_k, v_k)
    /// with the central velocity v_k = (y_{k+1} - y_{k-1}) / 2h.
    fn bvp_residual(&self, path: &[Point], h: f64) -> DVector<f64> {
        let n = path.len();
        let mut r = DVector::zeros(2 * (n - 2));
        for i in 1..n - 1 {
            let prev = path[i - 1].vec();
            let here = path[i].vec();
            let next = path[i + 1].vec();
            let v = (next - prev) / (2.0 * h);
            let acc = self.geodesic_accel(path[i], v);
            let res = next - 2.0 * here + prev + h * h * (-acc);
            r[2 * (i - 1)] = res[0];
            r[2 * (i - 1) + 1] = res[1];
        }
        r
    }

    fn bvp_jacobian(&self, path: &[Point], h: f64) -> DMatrix<f64> {
        let n = path.len();
        let dim = 2 * (n - 2);
        let mut jac = DMatrix::zeros(dim, dim);
        let ident = Matrix2::identity();
        for i in 1..n - 1 {
            let prev = path[i - 1].vec();
            let next = path[i + 1].vec();
            let v = (next - prev) / (2.0 * h);
            // Residual uses -accel, so the sign of the partials flips.
            let d_dv = -self.geodesic_accel_dv(path[i], v) * (h / 2.0);
            let d_dp = -self.geodesic_accel_dp(path[i], v) * (h * h);
            let row = 2 * (i - 1);
            let mut put = |col_node: usize, block: Matrix2<f64>| {
                if col_node == 0 || col_node == n - 1 {
                    return; // endpoints fixed
                }
                let col = 2 * (col_node - 1);
                for a in 0..2 {
                    for b in 0..2 {
                        jac[(row + a, col + b)] += block[(a, b)];
                    }
                }
            };
            put(i - 1, ident - d_dv);
            put(i, -2.0 * ident + d_dp);
            put(i + 1, ident + d_dv);
        }
        jac
    }

    /// Kinetic energy sampled at the path midpoint with a fourth-order
    /// central velocity stencil. The O(h^2) path error dominates, which is
    /// exactly what the coarse/fine Richardson step removes.
    fn path_energy(&self, path: &[Point]) -> f64 {
        let n = path.len();
        let h = 1.0 / (n - 1) as f64;
        let mid = n / 2;
        let v = (path[mid - 2].vec() - 8.0 * path[mid - 1].vec() + 8.0 * path[mid + 1].vec()
            - path[mid + 2].vec())
            / (12.0 * h);
        self.kinetic_energy(path[mid], v)
    }

    /// Endpoint velocities from one-sided five-point stencils.
    fn path_end_velocities(&self, path: &[Point]) -> (Vector2<f64>, Vector2<f64>) {
        let n = path.len();
        let h = 1.0 / (n - 1) as f64;
        let p = |i: usize| path[i].vec();
        let v_start = (-25.0 * p(0) + 48.0 * p(1) - 36.0 * p(2) + 16.0 * p(3) - 3.0 * p(4))
            / (12.0 * h);
        let v_end = (25.0 * p(n - 1) - 48.0 * p(n - 2) + 36.0 * p(n - 3) - 16.0 * p(n - 4)
            + 3.0 * p(n - 5))
            / (12.0 * h);
        (v_start, v_end)
    }

    // ----- world function and Van Vleck ----------------------------------

    /// World function `sb(x, x')`: half the signed squared geodesic
    /// distance (positive timelike), with covariant endpoint gradients and
    /// the Hamilton-Jacobi residual evaluated at `x`.
    pub fn world_function(&self, x: Point, xp: Point) -> Result<WorldFunction, GeometryError> {
        let path = self.geodesic(x, xp)?;
        Ok(self.world_function_from_path(x, xp, &path))
    }

    fn world_function_from_path(&self, x: Point, xp: Point, path: &GeodesicPath) -> WorldFunction {
        let value = path.energy;
        // sb_{;m}(x) = -g_{mn}(x) u^n(0), sb_{;m'}(x') = +g_{mn}(x') u^n(1).
        let gx = self.metric(x);
        let gxp = self.metric(xp);
        let grad_x = -(gx * path.v_start);
        let grad_xp = gxp * path.v_end;
        let ginv = self.inverse_metric(x);
        let hj = 2.0 * value - (ginv * grad_x).dot(&grad_x);
        WorldFunction { value, grad_x, grad_xp, hj_residual: hj.abs() }
    }

    /// Van Vleck determinant
    /// `D = -|g(x)|^{-1/2} det(-sb_{;m n'}) |g(x')|^{-1/2}`,
    /// with the mixed second derivatives taken by Richardson-extrapolated
    /// central differences of the world function. Coincident arguments and
    /// constant sigma return the exact value 1.
    pub fn van_vleck(&self, x: Point, xp: Point) -> Result<f64, GeometryError> {
        self.check_point(x)?;
        self.check_point(xp)?;
        if self.constant_sigma.is_some() || (x.x0 == xp.x0 && x.x1 == xp.x1) {
            return Ok(1.0);
        }
        let h = 0.02;
        let coarse = self.mixed_second(x, xp, h)?;
        let fine = self.mixed_second(x, xp, h / 2.0)?;
        let d = (4.0 * fine - coarse) / 3.0;
        // det(-d) = det(d) in two dimensions.
        let det = d[(0, 0)] * d[(1, 1)] - d[(0, 1)] * d[(1, 0)];
        let weight = (-2.0 * (self.sigma(x) + self.sigma(xp))).exp();
        Ok(-det * weight)
    }

    /// Matrix of sb_{;m n'} by central differences with step `h` on both
    /// endpoints.
    fn mixed_second(&self, x: Point, xp: Point, h: f64) -> Result<Matrix2<f64>, GeometryError> {
        let shift = |p: Point, axis: usize, s: f64| -> Point {
            match axis {
                0 => Point::new(p.x0 + s, p.x1),
                _ => Point::new(p.x0, p.x1 + s),
            }
        };
        let mut out = Matrix2::zeros();
        for m in 0..2 {
            for n in 0..2 {
                let pp = self.world_function(shift(x, m, h), shift(xp, n, h))?.value;
                let pm = self.world_function(shift(x, m, h), shift(xp, n, -h))?.value;
                let mp = self.world_function(shift(x, m, -h), shift(xp, n, h))?.value;
                let mm = self.world_function(shift(x, m, -h), shift(xp, n, -h))?.value;
                out[(m, n)] = (pp - pm - mp + mm) / (4.0 * h * h);
            }
        }
        Ok(out)
    }

    // ----- exponential map, normal coordinates, merged distance ----------

    /// Integrate the geodesic flow from `(p, v)` over affine time 1 with a
    /// fixed-step RK4 integrator; returns the endpoint position.
    fn exp_map(&self, p: Point, v: Vector2<f64>, steps: usize) -> Point {
        let mut pos = p.vec();
        let mut vel = v;
        let dt = 1.0 / steps as f64;
        for _ in 0..steps {
            let k1p = vel;
            let k1v = self.geodesic_accel(Point::from_vec(pos), vel);
            let k2p = vel + 0.5 * dt * k1v;
            let k2v = self.geodesic_accel(Point::from_vec(pos + 0.5 * dt * k1p), vel + 0.5 * dt * k1v);
            let k3p = vel + 0.5 * dt * k2v;
            let k3v = self.geodesic_accel(Point::from_vec(pos + 0.5 * dt * k2p), vel + 0.5 * dt * k2v);
            let k4p = vel + dt * k3v;
            let k4v = self.geodesic_accel(Point::from_vec(pos + dt * k3p), vel + dt * k3v);
            pos += dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            vel += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
        Point::from_vec(pos)
    }

    /// Inverse exponential map: the initial coordinate velocity `u` with
    /// `exp_y(u) = x` over affine time 1, found by Newton iteration on the
    /// shooting map.
    pub fn log_map(&self, y: Point, x: Point) -> Result<Vector2<f64>, GeometryError> {
        self.check_point(y)?;
        self.check_point(x)?;
        if self.constant_sigma.is_some() {
            return Ok(x.vec() - y.vec());
        }
        let mut u = x.vec() - y.vec();
        let mut miss = f64::INFINITY;
        for _ in 0..30 {
            let reach = self.exp_map(y, u, SHOOTING_STEPS).vec();
            let f = reach - x.vec();
            miss = f.amax();
            if miss < 1e-12 {
                return Ok(u);
            }
            // Forward-difference Jacobian of the shooting map.
            let d = 1e-6;
            let fx = self.exp_map(y, u + Vector2::new(d, 0.0), SHOOTING_STEPS).vec() - reach;
            let fy = self.exp_map(y, u + Vector2::new(0.0, d), SHOOTING_STEPS).vec() - reach;
            let jac = Matrix2::from_columns(&[fx / d, fy / d]);
            match jac.lu().solve(&f) {
                Some(step) => u -= step,
                None => break,
            }
        }
        if miss < 1e-9 {
            Ok(u)
        } else {
            Err(GeometryError::ShootingFailed { miss })
        }
    }

    /// Riemann normal coordinates of `x` about `y`, expressed in the
    /// orthonormal frame at `y` (so the metric at the base point is exactly
    /// `eta` and `eta(xi, xi) = 2 sb(y, x)`).
    pub fn normal_coordinates(&self, y: Point, x: Point) -> Result<Vector2<f64>, GeometryError> {
        let u = self.log_map(y, x)?;
        Ok(self.sigma(y).exp() * u)
    }

    /// Curvature-corrected squared separation of `x1`, `x2` in the normal
    /// patch about `y`:
    /// `L^2 = eta(d, d) - (R/6) [eta(d, d) eta(xi1, xi2) - eta(d, xi2) eta(xi1, d)]`
    /// with `d = xi2 - xi1`, which is the 2D form of the general
    /// `-1/3 R_{m a n b} xi1^a xi2^b d^m d^n` correction.
    pub fn merged_distance(&self, y: Point, x1: Point, x2: Point) -> Result<f64, GeometryError> {
        let xi1 = self.normal_coordinates(y, x1)?;
        let xi2 = self.normal_coordinates(y, x2)?;
        let d = xi2 - xi1;
        let r = self.curvature_at(y)?.scalar;
        Ok(eta(d, d) - r / 6.0 * (eta(d, d) * eta(xi1, xi2) - eta(d, xi2) * eta(xi1, d)))
    }
}

impl fmt::Debug for Geometry {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            SigmaField::Expression { .. } => write!(out, "Geometry(expression)"),
            SigmaField::Grid(g) => write!(out, "Geometry(grid {}x{})", g.n0, g.n1),
        }
    }
}

/// Solved affine-[0,1] geodesic between two points.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    /// Uniformly spaced trajectory including both endpoints.
    pub points: Vec<Point>,
    /// Conserved kinetic energy = world function of the endpoints.
    pub energy: f64,
    /// Coordinate velocity at affine time 0.
    pub v_start: Vector2<f64>,
    /// Coordinate velocity at affine time 1.
    pub v_end: Vector2<f64>,
}

impl GeodesicPath {
    /// Exact straight-line path for constant sigma.
    fn straight(x: Point, xp: Point, sigma_const: f64, interior: usize) -> GeodesicPath {
        let n = interior + 2;
        let d = xp.vec() - x.vec();
        let points = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                Point::from_vec(x.vec() + t * d)
            })
            .collect();
        GeodesicPath {
            points,
            energy: 0.5 * (2.0 * sigma_const).exp() * eta(d, d),
            v_start: d,
            v_end: d,
        }
    }
}

/// World function value with covariant endpoint gradients.
#[derive(Debug, Clone, Copy)]
pub struct WorldFunction {
    pub value: f64,
    /// sb_{;m} at the first argument (covariant components).
    pub grad_x: Vector2<f64>,
    /// sb_{;m'} at the second argument.
    pub grad_xp: Vector2<f64>,
    /// |2 sb - g^{mn}(x) sb_{;m} sb_{;n}|.
    pub hj_residual: f64,
}

/// Resample a path to `n` uniformly spaced nodes by linear interpolation;
/// used to seed the fine Newton pass from the coarse solution.
fn resample_path(path: &[Point], n: usize) -> Vec<Point> {
    let m = path.len();
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64 * (m - 1) as f64;
            let k = (t.floor() as usize).min(m - 2);
            let frac = t - k as f64;
            Point::from_vec(path[k].vec() * (1.0 - frac) + path[k + 1].vec() * frac)
        })
        .collect()
}
