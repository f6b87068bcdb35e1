//! Operator product expansions of the dressed vector field.
//!
//! The building block is the two-point coefficient kernel `Gamma_{mu nu}`:
//! the operator `(e^2/pi) dhat_{mu nu} + dual_mu dual_nu` applied to the
//! scalar kernel `V ln|M^2 sb + i eps|`, where `V` is the parametrix factor,
//! `sb` the world function, and `dhat = diag(1, -1)`. On a scalar the dual
//! derivative `sqrt(-g) eps_{mu nu} grad^nu` collapses to a plain partial
//! with respect to the opposite coordinate, so on a constant-sigma chart the
//! kernel has a closed form; otherwise the mixed derivative is taken by
//! Richardson-extrapolated central differences.
//!
//! Products of vector-field factors expand, through the exact combinatorics
//! of [`crate::wick`], into normal-ordered monomials multiplied by products
//! of `Gamma` kernels. Merge trees drive the expansion points together at
//! prescribed powers of a single scale and the limit report classifies each
//! coefficient along the ladder as convergent, log-divergent, or
//! power-divergent; divergences are data, not errors.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{eta, Geometry, GeometryError, Point};
use crate::parametrix::{hadamard_split, HadamardSeries, ModelParameters, ParametrixError};
use crate::wick::{
    normal_order, FieldId, FieldLabel, KernelFactor, OrderingTag, WickError, WickMonomial,
    WickPolynomial,
};

/// Largest total field degree accepted by [`expand_general`].
pub const MAX_EXPANSION_DEGREE: usize = 8;
/// Series order of the curved-space parametrix factor.
const CURVED_SPLIT_ORDER: usize = 2;
/// Truncation depth of the closed-form factor series on constant-sigma
/// charts; the terms fall like `(m^2 sb / 2)^n / (n!)^2`.
const FLAT_V_TERMS: usize = 13;
/// Default regulator inside `ln|M^2 sb + i eps|`; small enough that merge
/// ladders down to `eps = 2^-9` (separations of order `eps^2`) stay in the
/// clean logarithmic regime.
pub const DEFAULT_LOG_REGULATOR: f64 = 1e-16;

#[derive(Debug, Error)]
pub enum OpeError {
    /// The coefficient kernel was evaluated on the diagonal `x1 = x2`.
    #[error("coefficient kernel evaluated at coincident points")]
    CoincidentPoints,
    /// Total field degree beyond the supported expansion size.
    #[error("total degree {degree} exceeds the supported maximum {max}")]
    UnsupportedDegree { degree: usize, max: usize },
    /// With `m = 0` the kernel logarithm has no finite scale and the
    /// two-point coefficient diverges; the evaluation is refused rather
    /// than silently regulated.
    #[error("massless kernel: V ln|M^2 sb| has no finite massless limit")]
    MasslessLogDivergence,
    /// Merge-tree bookkeeping violates a structural invariant.
    #[error("invalid merge tree: {reason}")]
    InvalidTree { reason: String },
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("parametrix: {0}")]
    Parametrix(#[from] ParametrixError),
    #[error("wick algebra: {0}")]
    Wick(#[from] WickError),
}

/// `dhat = diag(1, -1)`: the constant tensor multiplying the undifferentiated
/// part of the coefficient kernel.
pub fn dhat(mu: usize, nu: usize) -> f64 {
    match (mu, nu) {
        (0, 0) => 1.0,
        (1, 1) => -1.0,
        _ => 0.0,
    }
}

// ---------------------------------------------------------------------------
// Evaluation context
// ---------------------------------------------------------------------------

/// Shared inputs of every kernel evaluation: the chart, the scalar-model
/// parameters (mass `m`, log scale `M^2`, regulator), and the gauge
/// coupling `e` fixing the contraction weight `pi/e^2`.
pub struct OpeContext {
    geom: Arc<Geometry>,
    params: ModelParameters,
    coupling: f64,
    /// Curved-space parametrix factor; `None` on constant-sigma charts
    /// (closed form) and in the massless case (evaluation is refused).
    series: Option<HadamardSeries>,
}

impl OpeContext {
    /// Model defaults: boson mass `m = e/sqrt(pi)` and log scale
    /// `M^2 = m^2`, so the kernel logarithm is dimensionless in model units.
    pub fn new(geom: Arc<Geometry>, coupling: f64) -> Result<OpeContext, OpeError> {
        let m2 = coupling * coupling / PI;
        let params = ModelParameters::new(m2.sqrt(), 0.0)
            .with_scale(m2)
            .with_eps(DEFAULT_LOG_REGULATOR);
        OpeContext::with_parameters(geom, params, coupling)
    }

    /// Explicit parameter set; `params.eps` is reused as the log regulator.
    pub fn with_parameters(
        geom: Arc<Geometry>,
        params: ModelParameters,
        coupling: f64,
    ) -> Result<OpeContext, OpeError> {
        params.validate()?;
        if !coupling.is_finite() || coupling <= 0.0 {
            return Err(OpeError::Parametrix(ParametrixError::InvalidParameter {
                name: "coupling",
                value: coupling,
            }));
        }
        let series = if geom.constant_sigma().is_some() || params.m == 0.0 {
            None
        } else {
            Some(hadamard_split(&geom, &params, CURVED_SPLIT_ORDER)?)
        };
        Ok(OpeContext { geom, params, coupling, series })
    }

    pub fn geometry(&self) -> &Arc<Geometry> {
        &self.geom
    }

    pub fn parameters(&self) -> &ModelParameters {
        &self.params
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    /// Weight `pi/e^2` carried by each contraction of two vector factors.
    pub fn kernel_scale(&self) -> f64 {
        PI / (self.coupling * self.coupling)
    }

    /// `e^2/pi`, the square of the boson mass in model units.
    pub fn mass_sq(&self) -> f64 {
        self.coupling * self.coupling / PI
    }

    fn require_massive(&self) -> Result<(), OpeError> {
        if self.params.m == 0.0 {
            return Err(OpeError::MasslessLogDivergence);
        }
        Ok(())
    }

    fn check_pair(&self, x1: Point, x2: Point) -> Result<(), OpeError> {
        self.geom.check_point(x1)?;
        self.geom.check_point(x2)?;
        if x1.x0 == x2.x0 && x1.x1 == x2.x1 {
            return Err(OpeError::CoincidentPoints);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scalar kernel and its closed-form pieces
// ---------------------------------------------------------------------------

/// Regulated logarithm `ln|M^2 sb + i eps| = (1/2) ln(M^4 sb^2 + eps^2)`
/// with its first two derivatives in `sb`.
fn log_factor(m2_scale: f64, eps: f64, sb: f64) -> (f64, f64, f64) {
    let m4 = m2_scale * m2_scale;
    let d = m4 * sb * sb + eps * eps;
    let value = 0.5 * d.ln();
    let d1 = m4 * sb / d;
    let d2 = m4 / d - 2.0 * m4 * m4 * sb * sb / (d * d);
    (value, d1, d2)
}

/// Flat parametrix factor `V(sb) = -sum_n (m^2/2)^n sb^n / (n!)^2` with its
/// first two derivatives in `sb`.
fn flat_v(m2: f64, sb: f64) -> (f64, f64, f64) {
    let half = 0.5 * m2;
    let mut c = -1.0;
    let (mut v, mut v1, mut v2) = (0.0, 0.0, 0.0);
    for n in 0..FLAT_V_TERMS {
        let nf = n as f64;
        let pw = sb.powi(n as i32);
        v += c * pw;
        if n >= 1 {
            v1 += nf * c * sb.powi(n as i32 - 1);
        }
        if n >= 2 {
            v2 += nf * (nf - 1.0) * c * sb.powi(n as i32 - 2);
        }
        c *= half / ((nf + 1.0) * (nf + 1.0));
    }
    (v, v1, v2)
}

/// The scalar kernel `V(x1, x2) ln|M^2 sb + i eps|`; real because of the
/// absolute value inside the logarithm.
pub fn scalar_kernel(ctx: &OpeContext, x1: Point, x2: Point) -> Result<f64, OpeError> {
    ctx.check_pair(x1, x2)?;
    ctx.require_massive()?;
    scalar_kernel_unchecked(ctx, x1, x2)
}

fn scalar_kernel_unchecked(ctx: &OpeContext, x1: Point, x2: Point) -> Result<f64, OpeError> {
    let m2 = ctx.params.m * ctx.params.m;
    if let Some(s0) = ctx.geom.constant_sigma() {
        let scale = (2.0 * s0).exp();
        let d = x1.vec() - x2.vec();
        let sb = 0.5 * scale * eta(d, d);
        let (v, _, _) = flat_v(m2, sb);
        let (l, _, _) = log_factor(ctx.params.m2_scale, ctx.params.eps, sb);
        return Ok(v * l);
    }
    let series = ctx.series.as_ref().expect("curved massive context holds a series");
    let sb = ctx.geom.world_function(x1, x2)?.value;
    let v = series.v_sum(x1, x2, sb)?.re;
    let (l, _, _) = log_factor(ctx.params.m2_scale, ctx.params.eps, sb);
    Ok(v * l)
}

/// Leading scalar kernel with the parametrix factor frozen at its diagonal
/// value `-1`: `-ln|M^2 sb + i eps|`.
fn leading_scalar_kernel(ctx: &OpeContext, x1: Point, x2: Point) -> Result<f64, OpeError> {
    let sb = if let Some(s0) = ctx.geom.constant_sigma() {
        let d = x1.vec() - x2.vec();
        0.5 * (2.0 * s0).exp() * eta(d, d)
    } else {
        ctx.geom.world_function(x1, x2)?.value
    };
    let (l, _, _) = log_factor(ctx.params.m2_scale, ctx.params.eps, sb);
    Ok(-l)
}

// ---------------------------------------------------------------------------
// The two-point coefficient kernel Gamma
// ---------------------------------------------------------------------------

/// The 2x2 coefficient kernel
/// `Gamma_{mu nu}(x1, x2) = ((e^2/pi) dhat_{mu nu} + dual_mu dual_nu)[V ln|M^2 sb + i eps|]`
/// with the first dual derivative taken at `x1` and the second at `x2`.
///
/// On a scalar both dual derivatives reduce to sign-flipped partials with
/// respect to the opposite coordinate, independently of the conformal
/// factor, so the tensor part is the mixed partial
/// `d^2 / dx1^{1-mu} dx2^{1-nu}` of the scalar kernel.
pub fn gamma_kernel(ctx: &OpeContext, x1: Point, x2: Point) -> Result<Matrix2<f64>, OpeError> {
    ctx.check_pair(x1, x2)?;
    ctx.require_massive()?;
    if let Some(s0) = ctx.geom.constant_sigma() {
        Ok(gamma_constant_sigma(ctx, s0, x1, x2, false))
    } else {
        gamma_finite_difference(ctx, x1, x2, false)
    }
}

/// [`gamma_kernel`] with the parametrix factor frozen at its diagonal value
/// `-1`: the leading singular structure, hand-differentiable in closed form.
pub fn gamma_kernel_leading(
    ctx: &OpeContext,
    x1: Point,
    x2: Point,
) -> Result<Matrix2<f64>, OpeError> {
    ctx.check_pair(x1, x2)?;
    ctx.require_massive()?;
    if let Some(s0) = ctx.geom.constant_sigma() {
        Ok(gamma_constant_sigma(ctx, s0, x1, x2, true))
    } else {
        gamma_finite_difference(ctx, x1, x2, true)
    }
}

/// Closed form on a constant-sigma chart. With `s = e^{2 sigma0}`,
/// `sb = (s/2) eta(d, d)`, the covariant gradients are
/// `a_mu = s eta_{mu rho} d^rho` at `x1`, `b_nu = -s eta_{nu rho} d^rho` at
/// `x2`, and the mixed second partial of `sb` is `s dhat_{mu nu}` after the
/// opposite-index flip of the dual derivatives.
fn gamma_constant_sigma(
    ctx: &OpeContext,
    sigma0: f64,
    x1: Point,
    x2: Point,
    leading: bool,
) -> Matrix2<f64> {
    let m2 = ctx.params.m * ctx.params.m;
    let scale = (2.0 * sigma0).exp();
    let d = x1.vec() - x2.vec();
    let sb = 0.5 * scale * eta(d, d);
    let (v, v1, v2) = if leading { (-1.0, 0.0, 0.0) } else { flat_v(m2, sb) };
    let (l, l1, l2) = log_factor(ctx.params.m2_scale, ctx.params.eps, sb);
    let f = v * l;
    let f1 = v1 * l + v * l1;
    let f2 = v2 * l + 2.0 * v1 * l1 + v * l2;
    let a = [scale * d[0], -scale * d[1]];
    let b = [-scale * d[0], scale * d[1]];
    let msq = ctx.mass_sq();
    Matrix2::from_fn(|mu, nu| {
        dhat(mu, nu) * (msq * f + scale * f1) + f2 * a[1 - mu] * b[1 - nu]
    })
}

/// Generic chart: `dhat` part by direct evaluation, tensor part by nested
/// central differences of the scalar kernel with one Richardson step.
fn gamma_finite_difference(
    ctx: &OpeContext,
    x1: Point,
    x2: Point,
    leading: bool,
) -> Result<Matrix2<f64>, OpeError> {
    let eval = |a: Point, b: Point| -> Result<f64, OpeError> {
        if leading {
            leading_scalar_kernel(ctx, a, b)
        } else {
            scalar_kernel_unchecked(ctx, a, b)
        }
    };
    let l = eval(x1, x2)?;
    let sep = (x1.vec() - x2.vec()).amax();
    let h0 = 1e-3 * (1.0 + sep);
    let mut out = Matrix2::zeros();
    for mu in 0..2 {
        for nu in 0..2 {
            let (am, bn) = (1 - mu, 1 - nu);
            let mixed = |h: f64| -> Result<f64, OpeError> {
                let shift = |p: Point, axis: usize, s: f64| -> Point {
                    let mut v = p.vec();
                    v[axis] += s;
                    Point::from_vec(v)
                };
                let pp = eval(shift(x1, am, h), shift(x2, bn, h))?;
                let pm = eval(shift(x1, am, h), shift(x2, bn, -h))?;
                let mp = eval(shift(x1, am, -h), shift(x2, bn, h))?;
                let mm = eval(shift(x1, am, -h), shift(x2, bn, -h))?;
                Ok((pp - pm - mp + mm) / (4.0 * h * h))
            };
            let coarse = mixed(h0)?;
            let fine = mixed(0.5 * h0)?;
            out[(mu, nu)] = dhat(mu, nu) * ctx.mass_sq() * l + (4.0 * fine - coarse) / 3.0;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Expansions
// ---------------------------------------------------------------------------

/// A group of vector-field factors sharing one expansion point; `indices`
/// lists the tensor index of each factor.
#[derive(Debug, Clone)]
pub struct FieldGroup {
    pub indices: Vec<u8>,
    pub point: Point,
}

impl FieldGroup {
    pub fn single(mu: u8, point: Point) -> FieldGroup {
        FieldGroup { indices: vec![mu], point }
    }

    pub fn power(indices: Vec<u8>, point: Point) -> FieldGroup {
        FieldGroup { indices, point }
    }
}

/// A product of vector-field factors rewritten in the normal-ordered basis.
///
/// Internally the factors are the rescaled fields `-dual grad Sigma`
/// `(= (e/sqrt(pi)) A)`; in that normalization every contraction carries a
/// unit combinatorial weight and the kernel of each contraction is exactly
/// `Gamma`. Coefficients of the plain `A`-field product are recovered by
/// weighting each contraction with `pi/e^2`, which is what
/// [`OpeTerm::coefficient`] and [`OpeExpansion::vacuum_expectation`] do.
#[derive(Debug)]
pub struct OpeExpansion {
    polynomial: WickPolynomial,
    points: Vec<Point>,
}

impl OpeExpansion {
    pub fn polynomial(&self) -> &WickPolynomial {
        &self.polynomial
    }

    /// Expansion point of each slot, in slot order.
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Total field degree of the expanded product.
    pub fn degree(&self) -> usize {
        self.polynomial
            .terms()
            .iter()
            .map(|t| t.monomial.degree() + 2 * t.kernels.len())
            .max()
            .unwrap_or(0)
    }

    /// Vacuum expectation value: the identity-monomial coefficients,
    /// evaluated with kernel `(pi/e^2) Gamma` at the bound points.
    pub fn vacuum_expectation(&self, ctx: &OpeContext) -> Result<Complex64, OpeError> {
        let expr = self.polynomial.vacuum_expectation();
        let mut pairs = Vec::new();
        for (_, kernels) in expr.terms() {
            for kf in kernels {
                pairs.push((kf.left_slot, kf.right_slot));
            }
        }
        let cache = gamma_cache(ctx, &self.points, &pairs)?;
        let kscale = ctx.kernel_scale();
        Ok(expr.evaluate(&|kf: &KernelFactor| {
            let g = &cache[&(kf.left_slot, kf.right_slot)];
            let (mu, nu) = factor_indices(kf);
            Complex64::new(kscale * g[(mu, nu)], 0.0)
        }))
    }
}

fn factor_indices(kf: &KernelFactor) -> (usize, usize) {
    (
        kf.left_label.tensor_index.unwrap_or(0) as usize,
        kf.right_label.tensor_index.unwrap_or(0) as usize,
    )
}

/// Evaluate `Gamma` once per distinct ordered slot pair.
fn gamma_cache(
    ctx: &OpeContext,
    points: &[Point],
    pairs: &[(usize, usize)],
) -> Result<BTreeMap<(usize, usize), Matrix2<f64>>, OpeError> {
    let mut cache = BTreeMap::new();
    for &(ls, rs) in pairs {
        if cache.contains_key(&(ls, rs)) {
            continue;
        }
        let g = gamma_kernel(ctx, points[ls - 1], points[rs - 1])?;
        cache.insert((ls, rs), g);
    }
    Ok(cache)
}

/// Expansion of the two-factor product `A_mu(x1) A_nu(x2)`: the
/// normal-ordered head plus the identity term carrying one `Gamma` kernel.
pub fn expand_two(mu: u8, nu: u8, x1: Point, x2: Point) -> Result<OpeExpansion, OpeError> {
    expand_general(&[FieldGroup::single(mu, x1), FieldGroup::single(nu, x2)])
}

/// Expansion of a general product of vector-field powers: the sum over all
/// contraction patterns, from the fully normal-ordered head down to the
/// all-contracted identity term (even degree) or the terminal single-field
/// terms (odd degree).
pub fn expand_general(groups: &[FieldGroup]) -> Result<OpeExpansion, OpeError> {
    let degree: usize = groups.iter().map(|g| g.indices.len()).sum();
    if degree > MAX_EXPANSION_DEGREE {
        return Err(OpeError::UnsupportedDegree { degree, max: MAX_EXPANSION_DEGREE });
    }
    let mut factors = Vec::with_capacity(degree);
    let mut points = Vec::new();
    for group in groups {
        if group.indices.is_empty() {
            continue;
        }
        points.push(group.point);
        let slot = points.len();
        for &mu in &group.indices {
            factors.push((FieldLabel::dual_gradient(FieldId::Sigma, mu)?, slot));
        }
    }
    let plain = WickMonomial::new(OrderingTag::Unordered, factors)?;
    let polynomial = normal_order(&plain, OrderingTag::Hadamard)?;
    Ok(OpeExpansion { polynomial, points })
}

// ---------------------------------------------------------------------------
// Reading off coefficients
// ---------------------------------------------------------------------------

/// One expansion term: a rational combinatorial weight, a contraction
/// pattern whose kernel is the matching product of `Gamma` factors, and the
/// surviving normal-ordered basis monomial.
#[derive(Debug, Clone)]
pub struct OpeTerm {
    rational: BigRational,
    kernels: Vec<KernelFactor>,
    basis: WickMonomial,
}

impl OpeTerm {
    pub fn rational(&self) -> &BigRational {
        &self.rational
    }

    /// Ordered slot pairs carrying a kernel factor.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        self.kernels.iter().map(|kf| (kf.left_slot, kf.right_slot)).collect()
    }

    pub fn kernel_count(&self) -> usize {
        self.kernels.len()
    }

    /// Surviving normal-ordered monomial (identity for the all-contracted
    /// terms).
    pub fn basis(&self) -> &WickMonomial {
        &self.basis
    }

    /// Numeric coefficient at the given slot points: the rational weight
    /// times `(pi/e^2) Gamma` per contraction.
    pub fn coefficient(&self, ctx: &OpeContext, points: &[Point]) -> Result<f64, OpeError> {
        let mut acc = self.rational.to_f64().expect("rational weight fits in f64");
        let kscale = ctx.kernel_scale();
        for kf in &self.kernels {
            let g = gamma_kernel(ctx, points[kf.left_slot - 1], points[kf.right_slot - 1])?;
            let (mu, nu) = factor_indices(kf);
            acc *= kscale * g[(mu, nu)];
        }
        Ok(acc)
    }

    /// Human-readable kernel description, e.g.
    /// `(pi/e^2)^2 G[0,1](x1,x2) G[0,0](x3,x4)`.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        if !self.rational.is_one() {
            let _ = write!(out, "{} ", self.rational);
        }
        if self.kernels.is_empty() {
            out.push('1');
            return out;
        }
        match self.kernels.len() {
            1 => out.push_str("(pi/e^2)"),
            k => {
                let _ = write!(out, "(pi/e^2)^{k}");
            }
        }
        for kf in &self.kernels {
            let (mu, nu) = factor_indices(kf);
            let _ = write!(out, " G[{},{}](x{},x{})", mu, nu, kf.left_slot, kf.right_slot);
        }
        out
    }

    /// Largest relative change of the coefficient under the symmetries of
    /// its own contraction pattern: flipping one kernel pair (with its
    /// indices) and transposing two kernel pairs. Symmetry of `Gamma` makes
    /// every such permutation a no-op up to rounding.
    pub fn pattern_symmetry_defect(
        &self,
        ctx: &OpeContext,
        points: &[Point],
    ) -> Result<f64, OpeError> {
        let base = self.coefficient(ctx, points)?;
        let scale = base.abs().max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..self.kernels.len() {
            let mut flipped = self.clone();
            let kf = &mut flipped.kernels[i];
            std::mem::swap(&mut kf.left_label, &mut kf.right_label);
            std::mem::swap(&mut kf.left_slot, &mut kf.right_slot);
            let v = flipped.coefficient(ctx, points)?;
            worst = worst.max((v - base).abs() / scale);
        }
        for i in 1..self.kernels.len() {
            let mut swapped = self.clone();
            swapped.kernels.swap(i - 1, i);
            let v = swapped.coefficient(ctx, points)?;
            worst = worst.max((v - base).abs() / scale);
        }
        Ok(worst)
    }
}

/// Split an expansion into its terms: the coefficient of each surviving
/// basis monomial is the rational weight times the `Gamma` product of the
/// contraction pattern.
pub fn read_off_coefficients(expansion: &OpeExpansion) -> Vec<OpeTerm> {
    expansion
        .polynomial
        .terms()
        .iter()
        .map(|t| OpeTerm {
            rational: t.coefficient.clone(),
            kernels: t.kernels.clone(),
            basis: t.monomial.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Merge trees
// ---------------------------------------------------------------------------

/// Displacement tree scaling several expansion points onto a common base:
/// leaf `i` sits at `base + sum over its path of eps^depth v`, where the
/// depth of a node is one more than its parent's (roots hang at depth one).
#[derive(Debug, Clone)]
pub struct MergeTree {
    base: Point,
    parents: Vec<Option<usize>>,
    displacements: Vec<Vector2<f64>>,
    depths: Vec<usize>,
    leaves: Vec<usize>,
    eps_max: f64,
}

impl MergeTree {
    /// Validates: parents precede children, leaf indices are in range,
    /// distinct leaves have distinct displacement paths, and every leaf
    /// stays inside the chart for `eps <= eps_max` (checked on a sample of
    /// scales, with the normal-neighbourhood solve exercised at `eps_max`).
    pub fn new(
        geom: &Geometry,
        base: Point,
        parents: Vec<Option<usize>>,
        displacements: Vec<Vector2<f64>>,
        leaves: Vec<usize>,
        eps_max: f64,
    ) -> Result<MergeTree, OpeError> {
        if parents.len() != displacements.len() {
            return Err(OpeError::InvalidTree {
                reason: format!(
                    "{} parents vs {} displacements",
                    parents.len(),
                    displacements.len()
                ),
            });
        }
        if !eps_max.is_finite() || eps_max <= 0.0 {
            return Err(OpeError::InvalidTree { reason: format!("eps_max = {eps_max}") });
        }
        let n = parents.len();
        let mut depths = vec![0usize; n];
        for (i, parent) in parents.iter().enumerate() {
            match parent {
                None => depths[i] = 1,
                Some(p) if *p < i => depths[i] = depths[*p] + 1,
                Some(p) => {
                    return Err(OpeError::InvalidTree {
                        reason: format!("node {i} lists later node {p} as parent"),
                    })
                }
            }
        }
        if leaves.is_empty() {
            return Err(OpeError::InvalidTree { reason: "no leaves".into() });
        }
        for &leaf in &leaves {
            if leaf >= n {
                return Err(OpeError::InvalidTree { reason: format!("leaf {leaf} out of range") });
            }
        }
        let tree = MergeTree { base, parents, displacements, depths, leaves, eps_max };
        let profiles: Vec<Vec<Vector2<f64>>> =
            tree.leaves.iter().map(|&l| tree.path_profile(l)).collect();
        for i in 0..profiles.len() {
            for j in i + 1..profiles.len() {
                if profiles[i] == profiles[j] {
                    return Err(OpeError::InvalidTree {
                        reason: format!("leaves {i} and {j} share the same displacement path"),
                    });
                }
            }
        }
        for leaf in 0..tree.leaves.len() {
            for step in 1..=4 {
                let eps = eps_max * step as f64 / 4.0;
                let p = tree.leaf_position(leaf, eps);
                geom.check_point(p).map_err(|e| OpeError::InvalidTree {
                    reason: format!("leaf {leaf} leaves the chart at eps = {eps}: {e}"),
                })?;
            }
            let p = tree.leaf_position(leaf, eps_max);
            geom.normal_coordinates(base, p).map_err(|e| OpeError::InvalidTree {
                reason: format!("leaf {leaf} is outside the normal patch at eps_max: {e}"),
            })?;
        }
        Ok(tree)
    }

    /// The standard two-scale tree on four points: two depth-one nodes with
    /// two depth-two children each, all four children being the leaves.
    pub fn two_scale(
        geom: &Geometry,
        base: Point,
        coarse: [Vector2<f64>; 2],
        fine: [Vector2<f64>; 4],
        eps_max: f64,
    ) -> Result<MergeTree, OpeError> {
        MergeTree::new(
            geom,
            base,
            vec![None, None, Some(0), Some(0), Some(1), Some(1)],
            vec![coarse[0], coarse[1], fine[0], fine[1], fine[2], fine[3]],
            vec![2, 3, 4, 5],
            eps_max,
        )
    }

    pub fn base(&self) -> Point {
        self.base
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn eps_max(&self) -> f64 {
        self.eps_max
    }

    /// Position of leaf `i` at scale `eps`:
    /// `base + sum_{path} eps^depth v`.
    pub fn leaf_position(&self, leaf: usize, eps: f64) -> Point {
        let mut acc = self.base.vec();
        let mut node = Some(self.leaves[leaf]);
        while let Some(i) = node {
            acc += eps.powi(self.depths[i] as i32) * self.displacements[i];
            node = self.parents[i];
        }
        Point::from_vec(acc)
    }

    /// Per-depth displacement sums along the path of a node; two leaves
    /// coincide for every `eps` exactly when these profiles match.
    fn path_profile(&self, node: usize) -> Vec<Vector2<f64>> {
        let max_depth = self.depths[node];
        let mut sums = vec![Vector2::zeros(); max_depth];
        let mut cursor = Some(node);
        while let Some(i) = cursor {
            sums[self.depths[i] - 1] += self.displacements[i];
            cursor = self.parents[i];
        }
        sums
    }
}

// ---------------------------------------------------------------------------
// Merge limits
// ---------------------------------------------------------------------------

/// Ladder `2^-3 .. 2^-9` used by the scaling fits.
pub fn default_merge_ladder() -> Vec<f64> {
    (3..=9).map(|k| 2f64.powi(-k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MergeClass {
    /// Values settle toward the fitted finite part.
    Convergent,
    /// Values follow `a ln(eps) + b` with `a` away from zero.
    LogDivergent,
    /// Values grow like a power of `eps`; `power_exponent` reports the
    /// fitted exponent.
    PowerDivergent,
}

/// Scaling analysis of one coefficient along the ladder.
#[derive(Debug, Clone, Serialize)]
pub struct MergeSeries {
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    /// Slope `a` of the least-squares model `a ln(eps) + b`.
    pub log_slope: f64,
    /// Intercept `b` of the same model: the finite part when the class is
    /// not power-divergent.
    pub finite_part: f64,
    /// Largest absolute residual of the log-linear fit.
    pub log_residual: f64,
    /// Least-squares slope of `ln|value|` against `ln(eps)`.
    pub power_exponent: f64,
    pub class: MergeClass,
}

/// Least-squares fits and classification of a value ladder.
fn analyze_series(epsilons: &[f64], values: &[f64]) -> MergeSeries {
    let n = epsilons.len() as f64;
    let xs: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sy: f64 = values.iter().sum();
    let sxy: f64 = xs.iter().zip(values).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let residual = xs
        .iter()
        .zip(values)
        .map(|(x, y)| (y - slope * x - intercept).abs())
        .fold(0.0, f64::max);

    let logs: Vec<f64> = values.iter().map(|v| v.abs().max(1e-300).ln()).collect();
    let sly: f64 = logs.iter().sum();
    let slxy: f64 = xs.iter().zip(&logs).map(|(x, y)| x * y).sum();
    let power_exponent = (n * slxy - sx * sly) / det;

    let vmax = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let class = if residual <= 1e-3 * vmax.max(1.0) {
        if slope.abs() <= 1e-3 * intercept.abs().max(1.0) {
            MergeClass::Convergent
        } else {
            MergeClass::LogDivergent
        }
    } else {
        MergeClass::PowerDivergent
    };
    MergeSeries {
        epsilons: epsilons.to_vec(),
        values: values.to_vec(),
        log_slope: slope,
        finite_part: intercept,
        log_residual: residual,
        power_exponent,
        class,
    }
}

/// One expansion term along the ladder: the full coefficient series and,
/// for each contraction in the pattern, the series of the underlying scalar
/// kernel `V ln|M^2 sb + i eps|` whose logarithmic scaling the coefficient
/// inherits before differentiation.
#[derive(Debug, Clone)]
pub struct MergeTermReport {
    pub term: OpeTerm,
    pub coefficient: MergeSeries,
    pub pair_scalars: Vec<((usize, usize), MergeSeries)>,
}

/// Limit report of [`merge_limit`].
#[derive(Debug, Clone)]
pub struct MergeReport {
    /// The fully normal-ordered head re-slotted onto the common base point:
    /// the merged monomial the tree realizes in the limit.
    pub merged_head: Option<WickMonomial>,
    pub terms: Vec<MergeTermReport>,
}

/// Evaluate every coefficient of `expansion` along the tree at each scale in
/// `epsilons` and classify the scaling. Slot `i` of the expansion is bound
/// to leaf `i - 1`; divergent ladders are reported, never raised.
pub fn merge_limit(
    ctx: &OpeContext,
    tree: &MergeTree,
    expansion: &OpeExpansion,
    epsilons: &[f64],
) -> Result<MergeReport, OpeError> {
    let slots = expansion.points.len();
    if slots != tree.leaf_count() {
        return Err(OpeError::InvalidTree {
            reason: format!("{} expansion slots vs {} leaves", slots, tree.leaf_count()),
        });
    }
    if epsilons.len() < 2 {
        return Err(OpeError::InvalidTree {
            reason: format!("scaling ladder needs at least two entries, got {}", epsilons.len()),
        });
    }
    for &eps in epsilons {
        if !(eps > 0.0 && eps <= tree.eps_max()) {
            return Err(OpeError::InvalidTree {
                reason: format!("ladder entry {eps} outside (0, eps_max = {}]", tree.eps_max()),
            });
        }
    }
    let positions: Vec<Vec<Point>> = epsilons
        .iter()
        .map(|&eps| (0..slots).map(|l| tree.leaf_position(l, eps)).collect())
        .collect();

    let ope_terms = read_off_coefficients(expansion);
    let mut terms = Vec::with_capacity(ope_terms.len());
    let mut merged_head = None;
    for term in ope_terms {
        if term.kernel_count() == 0 && term.basis.degree() > 0 {
            let factors =
                term.basis.factors().iter().map(|(l, _)| (l.clone(), 1)).collect::<Vec<_>>();
            merged_head = Some(WickMonomial::new(OrderingTag::Hadamard, factors)?);
        }
        let mut coeff_values = Vec::with_capacity(epsilons.len());
        for pts in &positions {
            coeff_values.push(term.coefficient(ctx, pts)?);
        }
        let mut pair_scalars = Vec::new();
        for (ls, rs) in term.pattern() {
            let mut values = Vec::with_capacity(epsilons.len());
            for pts in &positions {
                values.push(scalar_kernel(ctx, pts[ls - 1], pts[rs - 1])?);
            }
            pair_scalars.push(((ls, rs), analyze_series(epsilons, &values)));
        }
        terms.push(MergeTermReport {
            coefficient: analyze_series(epsilons, &coeff_values),
            pair_scalars,
            term,
        });
    }
    Ok(MergeReport { merged_head, terms })
}

// ---------------------------------------------------------------------------
// Associativity
// ---------------------------------------------------------------------------

/// Geodesic midpoint: exact average on constant-sigma charts, otherwise the
/// affine-parameter-1/2 node of the solved geodesic.
fn geodesic_midpoint(geom: &Geometry, a: Point, b: Point) -> Result<Point, OpeError> {
    if geom.constant_sigma().is_some() {
        return Ok(Point::from_vec(0.5 * (a.vec() + b.vec())));
    }
    let path = geom.geodesic(a, b)?;
    let n = path.points.len();
    let t = 0.5 * (n - 1) as f64;
    let (lo, hi) = (t.floor() as usize, t.ceil() as usize);
    let frac = t - lo as f64;
    Ok(Point::from_vec(
        (1.0 - frac) * path.points[lo].vec() + frac * path.points[hi].vec(),
    ))
}

/// Deviation ladder of [`associativity_check`].
#[derive(Debug, Clone, Serialize)]
pub struct AssociativityReport {
    pub ratios: Vec<f64>,
    /// Relative composition defect at each ratio.
    pub deviations: Vec<f64>,
    pub max_deviation: f64,
    /// Raw slope of `ln(deviation)` between the last two ratios.
    pub raw_order: f64,
    /// Raw slope corrected for the logarithmic factor `ln(1/ratio)`
    /// expected alongside the quadratic decay.
    pub corrected_order: f64,
    /// Largest relative defect of `Gamma_{mu nu}(x1, x2)` against
    /// `Gamma_{nu mu}(x2, x1)` over the index pairs, at the tightest inner
    /// configuration.
    pub symmetry_defect: f64,
}

/// Compare the direct expansion of an inner pair against the two-step
/// composition through their geodesic midpoint `z`: the inner expansion
/// rewrites `A_mu(x1) A_mu(x2)` as a monomial at `z`, so the composed
/// single-contraction coefficient against an outer factor at `x3` replaces
/// both kernels by `Gamma(z, x3)`. First-order transport terms cancel by
/// the midpoint choice and the defect decays quadratically in the inner
/// separation, up to a logarithmic factor.
///
/// At each `ratio` the inner pair is pulled toward `z` by that factor; the
/// reported deviation is the worst relative defect over the index choices.
pub fn associativity_check(
    ctx: &OpeContext,
    x1: Point,
    x2: Point,
    x3: Point,
    ratios: &[f64],
) -> Result<AssociativityReport, OpeError> {
    ctx.check_pair(x1, x2)?;
    ctx.require_massive()?;
    if ratios.len() < 2 {
        return Err(OpeError::InvalidTree {
            reason: format!("need at least two ratios, got {}", ratios.len()),
        });
    }
    let z = geodesic_midpoint(&ctx.geom, x1, x2)?;
    let g_z = gamma_kernel(ctx, z, x3)?;
    let denom = 2.0 * g_z.amax();

    let mut deviations = Vec::with_capacity(ratios.len());
    let mut tightest = (x1, x2);
    let mut tight_ratio = f64::INFINITY;
    for &ratio in ratios {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(OpeError::InvalidTree { reason: format!("ratio {ratio} outside (0, 1]") });
        }
        let x1s = Point::from_vec(z.vec() + ratio * (x1.vec() - z.vec()));
        let x2s = Point::from_vec(z.vec() + ratio * (x2.vec() - z.vec()));
        if ratio < tight_ratio {
            tight_ratio = ratio;
            tightest = (x1s, x2s);
        }
        let g1 = gamma_kernel(ctx, x1s, x3)?;
        let g2 = gamma_kernel(ctx, x2s, x3)?;
        let mut worst = 0.0f64;
        for mu in 0..2 {
            for rho in 0..2 {
                let defect = g1[(mu, rho)] + g2[(mu, rho)] - 2.0 * g_z[(mu, rho)];
                worst = worst.max(defect.abs());
            }
        }
        deviations.push(worst / denom);
    }

    let k = deviations.len();
    let (r1, r2) = (ratios[k - 2], ratios[k - 1]);
    let (d1, d2) = (deviations[k - 2].max(1e-300), deviations[k - 1].max(1e-300));
    let raw_order = (d1.ln() - d2.ln()) / (r1.ln() - r2.ln());
    let (l1, l2) = ((1.0 / r1).ln(), (1.0 / r2).ln());
    let corrected_order = raw_order - (l1.ln() - l2.ln()) / (r1.ln() - r2.ln());

    let (t1, t2) = tightest;
    let fwd = gamma_kernel(ctx, t1, t2)?;
    let bwd = gamma_kernel(ctx, t2, t1)?;
    let scale = fwd.amax().max(1e-300);
    let mut symmetry_defect = 0.0f64;
    for mu in 0..2 {
        for nu in 0..2 {
            symmetry_defect =
                symmetry_defect.max((fwd[(mu, nu)] - bwd[(nu, mu)]).abs() / scale);
        }
    }

    Ok(AssociativityReport {
        ratios: ratios.to_vec(),
        max_deviation: deviations.iter().fold(0.0f64, |a, &d| a.max(d)),
        deviations,
        raw_order,
        corrected_order,
        symmetry_defect,
    })
}

// ---------------------------------------------------------------------------
// Term dump
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct OpeTermDump {
    pub pattern: Vec<[usize; 2]>,
    pub kernel: String,
    pub basis: String,
    pub samples: Vec<CoefficientSample>,
}

#[derive(Debug, Serialize)]
pub struct CoefficientSample {
    pub points: Vec<[f64; 2]>,
    pub value: f64,
}

/// JSON view of a term list: contraction pattern, kernel description, basis
/// monomial, and the coefficient sampled at each configuration.
pub fn dump_terms(
    ctx: &OpeContext,
    terms: &[OpeTerm],
    configs: &[Vec<Point>],
) -> Result<serde_json::Value, OpeError> {
    let mut out = Vec::with_capacity(terms.len());
    for term in terms {
        let mut samples = Vec::with_capacity(configs.len());
        for config in configs {
            samples.push(CoefficientSample {
                points: config.iter().map(|p| [p.x0, p.x1]).collect(),
                value: term.coefficient(ctx, config)?,
            });
        }
        out.push(OpeTermDump {
            pattern: term.pattern().iter().map(|&(a, b)| [a, b]).collect(),
            kernel: term.describe(),
            basis: term.basis().to_string(),
            samples,
        });
    }
    Ok(serde_json::to_value(out).expect("dump serializes"))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_ctx() -> OpeContext {
        OpeContext::new(Arc::new(Geometry::minkowski(6.0)), PI.sqrt()).unwrap()
    }

    #[test]
    fn dhat_matches_the_signature_table() {
        assert_eq!(dhat(0, 0), 1.0);
        assert_eq!(dhat(1, 1), -1.0);
        assert_eq!(dhat(0, 1), 0.0);
        assert_eq!(dhat(1, 0), 0.0);
    }

    #[test]
    fn coincident_points_are_rejected() {
        let ctx = flat_ctx();
        let p = Point::new(0.1, 0.2);
        assert!(matches!(gamma_kernel(&ctx, p, p), Err(OpeError::CoincidentPoints)));
        assert!(matches!(scalar_kernel(&ctx, p, p), Err(OpeError::CoincidentPoints)));
    }

    #[test]
    fn massless_kernel_is_refused() {
        let geom = Arc::new(Geometry::minkowski(6.0));
        let params = ModelParameters::new(0.0, 0.0).with_eps(1e-12);
        let ctx = OpeContext::with_parameters(geom, params, PI.sqrt()).unwrap();
        let err = gamma_kernel(&ctx, Point::new(0.0, 0.5), Point::new(0.0, 0.0));
        assert!(matches!(err, Err(OpeError::MasslessLogDivergence)));
    }

    #[test]
    fn leading_kernel_reproduces_the_hand_closed_form() {
        // Equal-time pair at r = 0.5 with m = M = 1, e = sqrt(pi), frozen
        // factor -1: sb = -r^2/2 and
        //   G00 = -ln(r^2/2) - 1/sb - r^2/sb^2,
        //   G11 = -(-ln(r^2/2) - 1/sb),
        //   off-diagonal zero.
        let ctx = flat_ctx();
        let g = gamma_kernel_leading(&ctx, Point::new(0.0, 0.5), Point::new(0.0, 0.0)).unwrap();
        let sb = -0.125;
        let g00 = -(0.125f64).ln() - 1.0 / sb - 0.25 / (sb * sb);
        let g11 = -(-(0.125f64).ln() - 1.0 / sb);
        assert!((g[(0, 0)] - g00).abs() < 1e-10, "{} vs {}", g[(0, 0)], g00);
        assert!((g[(1, 1)] - g11).abs() < 1e-10, "{} vs {}", g[(1, 1)], g11);
        assert!(g[(0, 1)].abs() < 1e-12 && g[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn finite_difference_path_matches_closed_form_on_a_constant_chart() {
        // A constant nonzero sigma keeps the closed form valid while the
        // generic path knows nothing of it; agreement checks the mixed
        // finite differences and the chart scaling at once.
        let geom =
            Arc::new(Geometry::from_expr_str("0.3", crate::geometry::Domain::symmetric(6.0)).unwrap());
        let ctx = OpeContext::new(geom, PI.sqrt()).unwrap();
        let x1 = Point::new(0.1, 0.6);
        let x2 = Point::new(-0.05, 0.1);
        let closed = gamma_constant_sigma(&ctx, 0.3, x1, x2, false);
        let fd = gamma_finite_difference(&ctx, x1, x2, false).unwrap();
        for mu in 0..2 {
            for nu in 0..2 {
                let scale = closed.amax();
                assert!(
                    (closed[(mu, nu)] - fd[(mu, nu)]).abs() <= 1e-7 * scale,
                    "({mu},{nu}): {} vs {}",
                    closed[(mu, nu)],
                    fd[(mu, nu)]
                );
            }
        }
    }

    #[test]
    fn expansion_of_two_singles_has_head_and_identity_terms() {
        let x1 = Point::new(0.0, 0.7);
        let x2 = Point::new(0.1, -0.2);
        let exp = expand_two(0, 1, x1, x2).unwrap();
        let terms = read_off_coefficients(&exp);
        assert_eq!(terms.len(), 2);
        let head = terms.iter().find(|t| t.kernel_count() == 0).unwrap();
        assert_eq!(head.basis().degree(), 2);
        let contracted = terms.iter().find(|t| t.kernel_count() == 1).unwrap();
        assert_eq!(contracted.basis().degree(), 0);
        assert_eq!(contracted.pattern(), vec![(1, 2)]);
        assert!(contracted.rational().is_one());
    }

    #[test]
    fn two_point_vev_is_the_weighted_kernel() {
        let ctx = flat_ctx();
        let x1 = Point::new(0.0, 0.7);
        let x2 = Point::new(0.1, -0.2);
        for (mu, nu) in [(0u8, 0u8), (0, 1), (1, 1)] {
            let exp = expand_two(mu, nu, x1, x2).unwrap();
            let vev = exp.vacuum_expectation(&ctx).unwrap();
            let g = gamma_kernel(&ctx, x1, x2).unwrap();
            let expected = ctx.kernel_scale() * g[(mu as usize, nu as usize)];
            assert!((vev.re - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            assert!(vev.im.abs() < 1e-15);
        }
    }

    #[test]
    fn three_singles_expand_into_head_plus_cyclic_contractions() {
        let pts = [Point::new(0.0, 0.4), Point::new(0.05, -0.3), Point::new(-0.1, 0.9)];
        let groups: Vec<FieldGroup> =
            (0..3).map(|i| FieldGroup::single((i % 2) as u8, pts[i])).collect();
        let exp = expand_general(&groups).unwrap();
        let terms = read_off_coefficients(&exp);
        assert_eq!(terms.len(), 4);
        let mut patterns: Vec<Vec<(usize, usize)>> =
            terms.iter().filter(|t| t.kernel_count() == 1).map(|t| t.pattern()).collect();
        patterns.sort();
        assert_eq!(patterns, vec![vec![(1, 2)], vec![(1, 3)], vec![(2, 3)]]);
        for t in &terms {
            if t.kernel_count() == 1 {
                assert_eq!(t.basis().degree(), 1);
            }
        }
    }

    #[test]
    fn odd_degree_vacuum_expectation_vanishes() {
        let ctx = flat_ctx();
        let groups: Vec<FieldGroup> = (0..5)
            .map(|i| FieldGroup::single((i % 2) as u8, Point::new(0.02 * i as f64, 0.3 * i as f64 - 0.7)))
            .collect();
        let exp = expand_general(&groups).unwrap();
        assert_eq!(exp.vacuum_expectation(&ctx).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn degree_cap_is_enforced() {
        let groups: Vec<FieldGroup> =
            (0..9).map(|i| FieldGroup::single(0, Point::new(0.0, 0.1 * i as f64))).collect();
        match expand_general(&groups) {
            Err(OpeError::UnsupportedDegree { degree: 9, max: 8 }) => {}
            other => panic!("expected degree overflow, got {other:?}"),
        }
    }

    #[test]
    fn full_contraction_counts_follow_the_double_factorial() {
        // (k - 1)!! identity-term patterns for k singles, k even, up to the
        // supported maximum.
        for k in [2usize, 4, 6, 8] {
            let groups: Vec<FieldGroup> =
                (0..k).map(|i| FieldGroup::single(0, Point::new(0.0, 0.2 * i as f64))).collect();
            let exp = expand_general(&groups).unwrap();
            let terms = read_off_coefficients(&exp);
            let count = terms
                .iter()
                .filter(|t| t.basis().degree() == 0)
                .map(|t| {
                    assert!(t.rational().is_one());
                    1usize
                })
                .sum::<usize>();
            let expected: usize = (1..k).step_by(2).product();
            assert_eq!(count, expected, "k = {k}");
        }
    }

    #[test]
    fn pattern_symmetry_is_a_no_op_on_coefficients() {
        let ctx = flat_ctx();
        let pts = [
            Point::new(0.0, 0.8),
            Point::new(0.1, -0.4),
            Point::new(-0.2, 0.3),
            Point::new(0.05, 1.2),
        ];
        let groups: Vec<FieldGroup> =
            (0..4).map(|i| FieldGroup::single((i % 2) as u8, pts[i])).collect();
        let exp = expand_general(&groups).unwrap();
        for term in read_off_coefficients(&exp) {
            if term.kernel_count() >= 1 {
                let defect = term.pattern_symmetry_defect(&ctx, &pts).unwrap();
                assert!(defect <= 1e-10, "defect {defect} for {}", term.describe());
            }
        }
    }

    #[test]
    fn merge_tree_positions_follow_the_two_scale_layout() {
        let geom = Geometry::minkowski(6.0);
        let v1 = Vector2::new(0.0, 0.4);
        let v3 = Vector2::new(0.1, -0.2);
        let tree = MergeTree::two_scale(
            &geom,
            Point::new(0.0, 0.1),
            [v1, Vector2::new(0.0, -0.4)],
            [v3, Vector2::new(-0.1, 0.2), Vector2::new(0.05, 0.3), Vector2::new(-0.05, -0.3)],
            0.5,
        )
        .unwrap();
        let eps = 0.25;
        let p = tree.leaf_position(0, eps);
        let expected = Point::new(
            0.0 + eps * v1[0] + eps * eps * v3[0],
            0.1 + eps * v1[1] + eps * eps * v3[1],
        );
        assert!((p.x0 - expected.x0).abs() < 1e-15 && (p.x1 - expected.x1).abs() < 1e-15);
    }

    #[test]
    fn duplicate_leaf_paths_are_rejected() {
        let geom = Geometry::minkowski(6.0);
        let v = Vector2::new(0.0, 0.3);
        let err = MergeTree::new(
            &geom,
            Point::new(0.0, 0.0),
            vec![None, None],
            vec![v, v],
            vec![0, 1],
            0.5,
        );
        assert!(matches!(err, Err(OpeError::InvalidTree { .. })));
    }

    #[test]
    fn leaves_escaping_the_chart_are_rejected() {
        let geom = Geometry::minkowski(1.0);
        let err = MergeTree::new(
            &geom,
            Point::new(0.0, 0.9),
            vec![None, None],
            vec![Vector2::new(0.0, 0.5), Vector2::new(0.0, -0.5)],
            vec![0, 1],
            1.0,
        );
        assert!(matches!(err, Err(OpeError::InvalidTree { .. })));
    }

    #[test]
    fn series_classification_recognizes_the_three_shapes() {
        let ladder = default_merge_ladder();
        let constant: Vec<f64> = ladder.iter().map(|_| 2.5).collect();
        let s = analyze_series(&ladder, &constant);
        assert_eq!(s.class, MergeClass::Convergent);
        assert!((s.finite_part - 2.5).abs() < 1e-12);

        let log: Vec<f64> = ladder.iter().map(|e| 3.0 * e.ln() + 1.0).collect();
        let s = analyze_series(&ladder, &log);
        assert_eq!(s.class, MergeClass::LogDivergent);
        assert!((s.log_slope - 3.0).abs() < 1e-12);
        assert!((s.finite_part - 1.0).abs() < 1e-12);

        let power: Vec<f64> = ladder.iter().map(|e| 1.0 / (e * e)).collect();
        let s = analyze_series(&ladder, &power);
        assert_eq!(s.class, MergeClass::PowerDivergent);
        assert!((s.power_exponent + 2.0).abs() < 1e-12);
    }

    #[test]
    fn associativity_rejects_a_degenerate_inner_pair() {
        let ctx = flat_ctx();
        let p = Point::new(0.0, 0.3);
        let err = associativity_check(&ctx, p, p, Point::new(0.0, 1.5), &[0.125, 0.0625]);
        assert!(matches!(err, Err(OpeError::CoincidentPoints)));
    }

    #[test]
    fn term_dump_lists_pattern_kernel_and_samples() {
        let ctx = flat_ctx();
        let x1 = Point::new(0.0, 0.7);
        let x2 = Point::new(0.1, -0.2);
        let exp = expand_two(0, 0, x1, x2).unwrap();
        let terms = read_off_coefficients(&exp);
        let json = dump_terms(&ctx, &terms, &[vec![x1, x2]]).unwrap();
        let arr = json.as_array().unwrap();
        assert_eq!(arr.len(), 2);
        let contracted = arr
            .iter()
            .find(|t| !t["pattern"].as_array().unwrap().is_empty())
            .unwrap();
        assert_eq!(contracted["basis"], "1");
        assert!(contracted["kernel"].as_str().unwrap().contains("(pi/e^2)"));
        assert_eq!(contracted["samples"].as_array().unwrap().len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn gamma_is_symmetric_under_joint_swap(
            a0 in -0.8f64..0.8, a1 in -2.0f64..2.0,
            b0 in -0.8f64..0.8, b1 in -2.0f64..2.0,
        ) {
            let d0 = a0 - b0;
            let d1 = a1 - b1;
            prop_assume!((d0 * d0 - d1 * d1).abs() > 1e-3);
            let ctx = flat_ctx();
            let x1 = Point::new(a0, a1);
            let x2 = Point::new(b0, b1);
            let fwd = gamma_kernel(&ctx, x1, x2).unwrap();
            let bwd = gamma_kernel(&ctx, x2, x1).unwrap();
            let scale = fwd.amax().max(1.0);
            for mu in 0..2 {
                for nu in 0..2 {
                    prop_assert!(
                        (fwd[(mu, nu)] - bwd[(nu, mu)]).abs() <= 1e-9 * scale,
                        "({mu},{nu}): {} vs {}", fwd[(mu, nu)], bwd[(nu, mu)]
                    );
                }
            }
        }
    }
}
