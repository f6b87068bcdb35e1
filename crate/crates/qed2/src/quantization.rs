//! Mode-space quantization: symplectic spaces of Cauchy data, one-particle
//! structures, truncated Fock representations, quasi-free states, and the
//! lattice causal propagator feeding smeared field operators.
//!
//! A mode space carries a real antisymmetric nondegenerate form `Omega`
//! and a real symmetric covariance `mu` on `R^{2n}`. When the pair
//! saturates the uncertainty bound, `J = (1/2) mu^{-1} Omega` squares to
//! `-1` and the positive-frequency projection `K` maps Cauchy data to the
//! `n`-dimensional mode Hilbert space with
//!
//! ```text
//! <K psi1, K psi2> = mu(psi1, psi2) - (i/2) Omega(psi1, psi2).
//! ```
//!
//! `K` is produced by a diagonally pivoted rank-revealing Cholesky
//! factorization of the Hermitian matrix `mu - (i/2) Omega`; every row of
//! that matrix intertwines `J` with multiplication by `i`, so the rows of
//! the factor do as well and no eigendecomposition is needed.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tolerances;

#[derive(Debug, Error)]
pub enum QuantizationError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("symplectic form is not antisymmetric (defect {defect:.3e})")]
    NotAntisymmetric { defect: f64 },
    #[error("covariance is not symmetric (defect {defect:.3e})")]
    NotSymmetric { defect: f64 },
    #[error("{what} is degenerate")]
    Degenerate { what: String },
    #[error("uncertainty saturation violated: |J^2 + 1| = {defect:.3e}")]
    SaturationViolation { defect: f64 },
}

// ---------------------------------------------------------------------------
// Mode space and one-particle structure
// ---------------------------------------------------------------------------

/// Real phase space `R^{2n}` with a symplectic form and a covariance form.
#[derive(Debug, Clone)]
pub struct ModeSpace {
    dim: usize,
    omega: DMatrix<f64>,
    mu: DMatrix<f64>,
}

impl ModeSpace {
    /// Validate shapes, antisymmetry of `omega`, symmetry of `mu`, and
    /// nondegeneracy of `omega`. Positivity of `mu` is deferred to
    /// [`ModeSpace::complex_structure`], where a degenerate covariance
    /// surfaces as [`QuantizationError::Degenerate`].
    pub fn new(omega: DMatrix<f64>, mu: DMatrix<f64>) -> Result<ModeSpace, QuantizationError> {
        let dim = omega.nrows();
        if !omega.is_square() || !mu.is_square() || mu.nrows() != dim {
            return Err(QuantizationError::Dimension(format!(
                "omega is {}x{}, mu is {}x{}",
                omega.nrows(),
                omega.ncols(),
                mu.nrows(),
                mu.ncols()
            )));
        }
        if dim == 0 || dim % 2 != 0 {
            return Err(QuantizationError::Dimension(format!(
                "phase space must have positive even dimension, got {dim}"
            )));
        }
        let anti = (&omega + omega.transpose()).amax();
        if anti > tolerances::STRUCTURE_IDENTITY {
            return Err(QuantizationError::NotAntisymmetric { defect: anti });
        }
        let sym = (&mu - mu.transpose()).amax();
        if sym > tolerances::STRUCTURE_IDENTITY {
            return Err(QuantizationError::NotSymmetric { defect: sym });
        }
        if omega.clone().svd(false, false).rank(1e-10) < dim {
            return Err(QuantizationError::Degenerate { what: "symplectic form".into() });
        }
        Ok(ModeSpace { dim, omega, mu })
    }

    /// Standard pair `mu = I/2`, `Omega = [[0, I], [-I, 0]]` on `n` modes.
    pub fn standard(n_modes: usize) -> ModeSpace {
        let dim = 2 * n_modes;
        let mut omega = DMatrix::zeros(dim, dim);
        for k in 0..n_modes {
            omega[(k, n_modes + k)] = 1.0;
            omega[(n_modes + k, k)] = -1.0;
        }
        ModeSpace { dim, omega, mu: DMatrix::identity(dim, dim) * 0.5 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_modes(&self) -> usize {
        self.dim / 2
    }

    pub fn omega_matrix(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn mu_matrix(&self) -> &DMatrix<f64> {
        &self.mu
    }

    pub fn omega_form(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a.transpose() * &self.omega * b)[(0, 0)]
    }

    pub fn mu_form(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a.transpose() * &self.mu * b)[(0, 0)]
    }

    /// Build the one-particle structure: `J = (1/2) mu^{-1} Omega`, checked
    /// to square to `-1`, and the mode projection `K`.
    pub fn complex_structure(&self) -> Result<OneParticleStructure, QuantizationError> {
        let chol = match self.mu.clone().cholesky() {
            Some(c) => c,
            None => return Err(QuantizationError::Degenerate { what: "covariance".into() }),
        };
        let j = chol.solve(&(&self.omega * 0.5));
        let defect = (&j * &j + DMatrix::identity(self.dim, self.dim)).amax();
        if defect > tolerances::STRUCTURE_IDENTITY {
            return Err(QuantizationError::SaturationViolation { defect });
        }
        let k = positive_frequency_rows(&self.mu, &self.omega, self.dim / 2)?;
        // Real 2n x 2n system [Re K; Im K] inverting the mode projection.
        let n = self.dim / 2;
        let mut stacked = DMatrix::zeros(self.dim, self.dim);
        for r in 0..n {
            for c in 0..self.dim {
                stacked[(r, c)] = k[(r, c)].re;
                stacked[(n + r, c)] = k[(r, c)].im;
            }
        }
        Ok(OneParticleStructure { space: self.clone(), j, k, stacked })
    }
}

/// Diagonally pivoted Cholesky of `M = mu - (i/2) Omega`, stopped after
/// `n` rows. `M` is Hermitian positive semidefinite of rank `n` exactly
/// when the pair saturates the uncertainty bound; each extracted row lies
/// in the row space of `M` and therefore obeys `row J = i row`.
fn positive_frequency_rows(
    mu: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    n: usize,
) -> Result<DMatrix<Complex64>, QuantizationError> {
    let dim = mu.nrows();
    let mut m = DMatrix::from_fn(dim, dim, |i, j| Complex64::new(mu[(i, j)], -0.5 * omega[(i, j)]));
    let mut k = DMatrix::zeros(n, dim);
    for row in 0..n {
        let mut p = 0;
        let mut best = f64::NEG_INFINITY;
        for i in 0..dim {
            if m[(i, i)].re > best {
                best = m[(i, i)].re;
                p = i;
            }
        }
        if best <= 1e-12 {
            return Err(QuantizationError::SaturationViolation { defect: best.abs() });
        }
        let scale = best.sqrt();
        for c in 0..dim {
            k[(row, c)] = m[(p, c)] / scale;
        }
        for i in 0..dim {
            for c in 0..dim {
                let v = k[(row, i)].conj() * k[(row, c)];
                m[(i, c)] -= v;
            }
        }
    }
    Ok(k)
}

/// Saturated pair with its complex structure `J` and mode projection `K`.
pub struct OneParticleStructure {
    space: ModeSpace,
    j: DMatrix<f64>,
    k: DMatrix<Complex64>,
    /// `[Re K; Im K]` as a real matrix, for the inverse projection.
    stacked: DMatrix<f64>,
}

impl fmt::Debug for OneParticleStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OneParticleStructure").field("dim", &self.space.dim).finish()
    }
}

impl OneParticleStructure {
    pub fn space(&self) -> &ModeSpace {
        &self.space
    }

    pub fn complex_structure_matrix(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn projection_matrix(&self) -> &DMatrix<Complex64> {
        &self.k
    }

    /// `K psi`, the positive-frequency mode amplitudes of real Cauchy data.
    pub fn project(&self, psi: &DVector<f64>) -> DVector<Complex64> {
        let n = self.space.n_modes();
        DVector::from_fn(n, |r, _| {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..self.space.dim {
                acc += self.k[(r, c)] * psi[c];
            }
            acc
        })
    }

    /// Inverse of [`OneParticleStructure::project`]: the unique real Cauchy
    /// data with the given mode amplitudes.
    pub fn cauchy_data(&self, modes: &DVector<Complex64>) -> DVector<f64> {
        let n = self.space.n_modes();
        let mut rhs = DVector::zeros(self.space.dim);
        for r in 0..n {
            rhs[r] = modes[r].re;
            rhs[n + r] = modes[r].im;
        }
        self.stacked
            .clone()
            .lu()
            .solve(&rhs)
            .expect("mode projection is invertible for a saturated pair")
    }

    /// Hermitian pairing `mu - (i/2) Omega` evaluated on real data.
    pub fn pairing(&self, a: &DVector<f64>, b: &DVector<f64>) -> Complex64 {
        Complex64::new(self.space.mu_form(a, b), -0.5 * self.space.omega_form(a, b))
    }

    /// Randomized report on the defining identities of the projection.
    pub fn projection_report(&self, pairs: usize, seed: u64) -> ProjectionReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.space.dim;
        let mut report = ProjectionReport::default();
        for _ in 0..pairs {
            let a = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let ka = self.project(&a);
            let kb = self.project(&b);
            let inner = ka.dotc(&kb);
            report.record_pairing((inner - self.pairing(&a, &b)).norm());
            // Positivity of the diagonal.
            let norm = ka.dotc(&ka);
            report.record_positivity(norm.re, norm.im.abs());
            // Conjugate sectors are Omega-orthogonal: with
            // fbar = (a + i J a)/2, the form fbar^T Omega gbar vanishes.
            let ja = &self.j * &a;
            let jb = &self.j * &b;
            let mut cross = Complex64::new(0.0, 0.0);
            for r in 0..dim {
                for c in 0..dim {
                    let fr = Complex64::new(a[r], ja[r]) * 0.5;
                    let gc = Complex64::new(b[c], jb[c]) * 0.5;
                    cross += fr * self.space.omega[(r, c)] * gc;
                }
            }
            report.record_cross(cross.norm());
            // Intertwining K J = i K through the sample vector.
            let kja = self.project(&ja);
            let defect = (0..ka.len())
                .map(|r| (kja[r] - Complex64::i() * ka[r]).norm())
                .fold(0.0f64, f64::max);
            report.record_intertwine(defect);
            // Round trip.
            let back = self.cauchy_data(&ka);
            report.record_round_trip((&back - &a).amax());
        }
        report
    }
}

/// Worst-case defects over the random sample of `projection_report`.
#[derive(Debug, Clone, Default)]
pub struct ProjectionReport {
    pub max_pairing_defect: f64,
    pub max_imag_norm: f64,
    pub min_diagonal: f64,
    pub max_cross_defect: f64,
    pub max_intertwine_defect: f64,
    pub max_round_trip_defect: f64,
}

impl ProjectionReport {
    fn record_pairing(&mut self, v: f64) {
        self.max_pairing_defect = self.max_pairing_defect.max(v);
    }
    fn record_positivity(&mut self, norm: f64, imag: f64) {
        if self.min_diagonal == 0.0 {
            self.min_diagonal = norm;
        }
        self.min_diagonal = self.min_diagonal.min(norm);
        self.max_imag_norm = self.max_imag_norm.max(imag);
    }
    fn record_cross(&mut self, v: f64) {
        self.max_cross_defect = self.max_cross_defect.max(v);
    }
    fn record_intertwine(&mut self, v: f64) {
        self.max_intertwine_defect = self.max_intertwine_defect.max(v);
    }
    fn record_round_trip(&mut self, v: f64) {
        self.max_round_trip_defect = self.max_round_trip_defect.max(v);
    }

    /// All identity defects below the structural tolerance.
    pub fn passes(&self) -> bool {
        let t = tolerances::STRUCTURE_IDENTITY;
        self.max_pairing_defect < t
            && self.max_imag_norm < t
            && self.max_cross_defect < t
            && self.max_intertwine_defect < t
            && self.max_round_trip_defect < t
            && self.min_diagonal >= -t
    }
}

// ---------------------------------------------------------------------------
// Truncated Fock representations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistics {
    Bose,
    Fermi,
}

/// Default bosonic occupation cutoff.
pub const DEFAULT_OCCUPATION_CUTOFF: usize = 6;

/// Finite-dimensional Fock representation. Bosonic states are occupation
/// multi-indices with total occupation at most `n_max`; creation operators
/// drop transitions that would cross the ceiling, so canonical
/// commutators hold exactly only on states with total occupation at most
/// `n_max - 2`. Fermionic states are the full `2^n` occupation patterns
/// (Jordan-Wigner), and the anticommutation relations are exact.
pub struct TruncatedFock {
    statistics: Statistics,
    n_modes: usize,
    n_max: usize,
    basis: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl fmt::Debug for TruncatedFock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TruncatedFock")
            .field("statistics", &self.statistics)
            .field("n_modes", &self.n_modes)
            .field("n_max", &self.n_max)
            .field("dim", &self.basis.len())
            .finish()
    }
}

impl TruncatedFock {
    pub fn bosonic(n_modes: usize, n_max: usize) -> TruncatedFock {
        let mut basis = Vec::new();
        let mut state = vec![0u32; n_modes];
        enumerate_bose(&mut basis, &mut state, 0, n_max as u32);
        basis.sort();
        let index = basis.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        TruncatedFock { statistics: Statistics::Bose, n_modes, n_max, basis, index }
    }

    pub fn fermionic(n_modes: usize) -> TruncatedFock {
        let mut basis = Vec::new();
        for mask in 0..(1usize << n_modes) {
            basis.push((0..n_modes).map(|k| ((mask >> k) & 1) as u32).collect());
        }
        basis.sort();
        let index = basis.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        TruncatedFock { statistics: Statistics::Fermi, n_modes, n_max: n_modes, basis, index }
    }

    pub fn statistics(&self) -> Statistics {
        self.statistics
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn occupation_cutoff(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Index of the zero-occupation state.
    pub fn vacuum_index(&self) -> usize {
        self.index[&vec![0u32; self.n_modes]]
    }

    pub fn basis_state(&self, idx: usize) -> &[u32] {
        &self.basis[idx]
    }

    pub fn total_occupation(&self, idx: usize) -> u32 {
        self.basis[idx].iter().sum()
    }

    /// Matrix of `a_k^dagger` (ceiling transitions dropped for bosons).
    pub fn creation(&self, k: usize) -> DMatrix<Complex64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (s_idx, s) in self.basis.iter().enumerate() {
            match self.statistics {
                Statistics::Bose => {
                    let total: u32 = s.iter().sum();
                    if (total as usize) >= self.n_max {
                        continue;
                    }
                    let mut t = s.clone();
                    t[k] += 1;
                    let amp = ((s[k] + 1) as f64).sqrt();
                    m[(self.index[&t], s_idx)] = Complex64::new(amp, 0.0);
                }
                Statistics::Fermi => {
                    if s[k] == 1 {
                        continue;
                    }
                    let mut t = s.clone();
                    t[k] = 1;
                    let string: u32 = s[..k].iter().sum();
                    let sign = if string % 2 == 0 { 1.0 } else { -1.0 };
                    m[(self.index[&t], s_idx)] = Complex64::new(sign, 0.0);
                }
            }
        }
        m
    }

    pub fn annihilation(&self, k: usize) -> DMatrix<Complex64> {
        self.creation(k).transpose()
    }

    /// `a(w) = sum_k w_k a_k` (linear in `w`).
    pub fn a(&self, w: &DVector<Complex64>) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for k in 0..self.n_modes {
            m += self.annihilation(k) * w[k];
        }
        m
    }

    /// `a^dagger(w) = sum_k w_k a_k^dagger` (linear in `w`).
    pub fn a_dagger(&self, w: &DVector<Complex64>) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for k in 0..self.n_modes {
            m += self.creation(k) * w[k];
        }
        m
    }

    /// Vacuum expectation of an operator matrix.
    pub fn vacuum_expectation(&self, op: &DMatrix<Complex64>) -> Complex64 {
        let v = self.vacuum_index();
        op[(v, v)]
    }
}

fn enumerate_bose(basis: &mut Vec<Vec<u32>>, state: &mut Vec<u32>, mode: usize, budget: u32) {
    if mode == state.len() {
        basis.push(state.clone());
        return;
    }
    for occ in 0..=budget {
        state[mode] = occ;
        enumerate_bose(basis, state, mode + 1, budget - occ);
    }
    state[mode] = 0;
}

/// Smeared field operator `phi(f) = i a(conj u) - i a^dagger(u)` with
/// `u = K(Delta f)`, plus a bound on the amplitude lost to the occupation
/// ceiling.
pub struct FieldOperator {
    pub matrix: DMatrix<Complex64>,
    /// Largest norm dropped by a single ceiling-state application.
    pub truncation_loss: f64,
    /// True when the cutoff discards any amplitude; canonical commutators
    /// then hold only below the ceiling.
    pub truncated: bool,
}

impl fmt::Debug for FieldOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FieldOperator")
            .field("dim", &self.matrix.nrows())
            .field("truncation_loss", &self.truncation_loss)
            .field("truncated", &self.truncated)
            .finish()
    }
}

/// Build the smeared field operator from mode amplitudes `u`.
pub fn field_operator(fock: &TruncatedFock, u: &DVector<Complex64>) -> FieldOperator {
    let conj_u = u.map(|z| z.conj());
    let matrix = fock.a(&conj_u) * Complex64::i() - fock.a_dagger(u) * Complex64::i();
    let mut loss = 0.0f64;
    if fock.statistics == Statistics::Bose {
        for idx in 0..fock.dim() {
            if fock.total_occupation(idx) as usize == fock.n_max {
                let s = fock.basis_state(idx);
                let dropped: f64 =
                    (0..fock.n_modes).map(|k| u[k].norm_sqr() * (s[k] + 1) as f64).sum();
                loss = loss.max(dropped.sqrt());
            }
        }
    }
    FieldOperator { matrix, truncation_loss: loss, truncated: loss > 0.0 }
}

// ---------------------------------------------------------------------------
// Quasi-free states
// ---------------------------------------------------------------------------

/// Quasi-free state over a one-particle structure. The sign flag flips the
/// symmetric part of the two-point pairing (`-1` selects the indefinite
/// variant used by the auxiliary-field sector).
pub struct QuasiFreeState {
    ops: OneParticleStructure,
    sign: f64,
}

impl QuasiFreeState {
    pub fn new(ops: OneParticleStructure, sign: f64) -> Result<QuasiFreeState, QuantizationError> {
        if sign != 1.0 && sign != -1.0 {
            return Err(QuantizationError::Dimension(format!("sign flag must be +-1, got {sign}")));
        }
        Ok(QuasiFreeState { ops, sign })
    }

    pub fn structure(&self) -> &OneParticleStructure {
        &self.ops
    }

    /// Two-point function `sign mu - (i/2) Omega` on Cauchy data.
    pub fn two_point(&self, a: &DVector<f64>, b: &DVector<f64>) -> Complex64 {
        Complex64::new(
            self.sign * self.ops.space.mu_form(a, b),
            -0.5 * self.ops.space.omega_form(a, b),
        )
    }

    /// n-point function: zero for odd n, the sum over perfect matchings of
    /// ordered two-point factors for even n.
    pub fn npoint(&self, data: &[DVector<f64>]) -> Complex64 {
        let n = data.len();
        if n % 2 == 1 {
            return Complex64::new(0.0, 0.0);
        }
        let omega = DMatrix::from_fn(n, n, |i, j| self.two_point(&data[i], &data[j]));
        sum_over_pairings(&omega, &(0..n).collect::<Vec<_>>())
    }
}

/// Sum over perfect matchings of `indices`, each matching contributing the
/// product of `omega[(i, j)]` over its pairs with `i < j` in list order.
fn sum_over_pairings(omega: &DMatrix<Complex64>, indices: &[usize]) -> Complex64 {
    if indices.is_empty() {
        return Complex64::new(1.0, 0.0);
    }
    let first = indices[0];
    let mut acc = Complex64::new(0.0, 0.0);
    for p in 1..indices.len() {
        let partner = indices[p];
        let rest: Vec<usize> = indices[1..]
            .iter()
            .copied()
            .filter(|&i| i != partner)
            .collect();
        acc += omega[(first, partner)] * sum_over_pairings(omega, &rest);
    }
    acc
}

// ---------------------------------------------------------------------------
// Fermionic structure
// ---------------------------------------------------------------------------

/// Jordan-Wigner fermion fields over a positive-definite mode metric
/// `Lambda`: with `Lambda = L^H L`,
/// `psi(v) = sum_k (L v)_k b_k` and
/// `psi_bar(u) = sum_k conj((L u)_k) b_k^dagger`, so that
/// `{psi(v), psi_bar(u)} = i S(v, u) 1` with `S(v, u) = -i u^H Lambda v`.
pub struct FermionStructure {
    fock: TruncatedFock,
    lambda: DMatrix<Complex64>,
    l: DMatrix<Complex64>,
}

impl fmt::Debug for FermionStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FermionStructure").field("n_modes", &self.fock.n_modes).finish()
    }
}

/// Build the fermionic structure; `Lambda` must be Hermitian positive.
pub fn fermion_structure(
    lambda: DMatrix<Complex64>,
) -> Result<FermionStructure, QuantizationError> {
    if !lambda.is_square() {
        return Err(QuantizationError::Dimension(format!(
            "mode metric is {}x{}",
            lambda.nrows(),
            lambda.ncols()
        )));
    }
    let herm = (&lambda - lambda.adjoint()).map(|z| z.norm()).max();
    if herm > tolerances::STRUCTURE_IDENTITY {
        return Err(QuantizationError::NotSymmetric { defect: herm });
    }
    let l = match hermitian_cholesky_upper(&lambda) {
        Some(l) => l,
        None => return Err(QuantizationError::Degenerate { what: "fermionic mode metric".into() }),
    };
    let fock = TruncatedFock::fermionic(lambda.nrows());
    Ok(FermionStructure { fock, lambda, l })
}

/// Upper factor `U` with `U^H U = m` for Hermitian positive-definite `m`,
/// or `None` when a pivot fails to be real and positive. The explicit
/// positivity check matters: a complex square root always exists, so a
/// generic factorization would silently accept an indefinite metric.
fn hermitian_cholesky_upper(m: &DMatrix<Complex64>) -> Option<DMatrix<Complex64>> {
    let n = m.nrows();
    let scale = m.map(|z| z.norm()).max().max(1.0);
    let mut l = DMatrix::<Complex64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)].conj();
        }
        if d.re <= 1e-12 * scale || d.im.abs() > 1e-10 * scale {
            return None;
        }
        let pivot = d.re.sqrt();
        l[(j, j)] = Complex64::new(pivot, 0.0);
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = v / pivot;
        }
    }
    Some(l.adjoint())
}

impl FermionStructure {
    pub fn fock(&self) -> &TruncatedFock {
        &self.fock
    }

    pub fn psi(&self, v: &DVector<Complex64>) -> DMatrix<Complex64> {
        self.fock.a(&(&self.l * v))
    }

    pub fn psi_bar(&self, u: &DVector<Complex64>) -> DMatrix<Complex64> {
        self.fock.a_dagger(&(&self.l * u).map(|z| z.conj()))
    }

    /// Anticommutator pairing: `{psi(v), psi_bar(u)} = i S(v, u) 1`.
    pub fn s_pairing(&self, v: &DVector<Complex64>, u: &DVector<Complex64>) -> Complex64 {
        -Complex64::i() * (u.adjoint() * &self.lambda * v)[(0, 0)]
    }
}

// ---------------------------------------------------------------------------
// Lattice causal propagator
// ---------------------------------------------------------------------------

/// Periodic spatial lattice for the 1+1 Klein-Gordon equation, carrying
/// the ground-state mode space and a leapfrog causal propagator.
pub struct LatticeKleinGordon {
    n_sites: usize,
    dx: f64,
    dt: f64,
    mass: f64,
    /// Spatial operator `m^2 - Laplacian` as a matrix.
    xi: DMatrix<f64>,
}

impl fmt::Debug for LatticeKleinGordon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatticeKleinGordon")
            .field("n_sites", &self.n_sites)
            .field("dx", &self.dx)
            .field("dt", &self.dt)
            .field("mass", &self.mass)
            .finish()
    }
}

impl LatticeKleinGordon {
    pub fn new(n_sites: usize, dx: f64, mass: f64) -> LatticeKleinGordon {
        let mut xi = DMatrix::zeros(n_sites, n_sites);
        for i in 0..n_sites {
            xi[(i, i)] = mass * mass + 2.0 / (dx * dx);
            xi[(i, (i + 1) % n_sites)] -= 1.0 / (dx * dx);
            xi[(i, (n_sites + i - 1) % n_sites)] -= 1.0 / (dx * dx);
        }
        // Leapfrog is stable for dt < 2 / omega_max; stay at 40% of that.
        let omega_max = (mass * mass + 4.0 / (dx * dx)).sqrt();
        let dt = 0.8 / omega_max;
        LatticeKleinGordon { n_sites, dx, dt, mass, xi }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Ground-state mode space: symplectic form `dx sum_i (phi_i pi'_i -
    /// pi_i phi'_i)` and covariance `mu = (dx/2) diag(Xi^{1/2}, Xi^{-1/2})`.
    /// The `dx` weight makes both forms quadrature approximations of their
    /// continuum counterparts, so the commutator pairing of causal
    /// solutions agrees with the spacetime integral `int f1 (Delta f2)`.
    pub fn mode_space(&self) -> ModeSpace {
        let n = self.n_sites;
        let eig = self.xi.clone().symmetric_eigen();
        let half = DMatrix::from_fn(n, n, |i, j| {
            let mut acc = 0.0;
            for k in 0..n {
                acc += eig.eigenvectors[(i, k)] * eig.eigenvalues[k].sqrt() * eig.eigenvectors[(j, k)];
            }
            acc
        });
        let inv_half = DMatrix::from_fn(n, n, |i, j| {
            let mut acc = 0.0;
            for k in 0..n {
                acc +=
                    eig.eigenvectors[(i, k)] / eig.eigenvalues[k].sqrt() * eig.eigenvectors[(j, k)];
            }
            acc
        });
        let mut mu = DMatrix::zeros(2 * n, 2 * n);
        let mut omega = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                mu[(i, j)] = 0.5 * self.dx * half[(i, j)];
                mu[(n + i, n + j)] = 0.5 * self.dx * inv_half[(i, j)];
            }
            omega[(i, n + i)] = self.dx;
            omega[(n + i, i)] = -self.dx;
        }
        ModeSpace { dim: 2 * n, omega, mu }
    }

    /// Apply the causal propagator to a spacetime test function sampled on
    /// `steps + 1` time slices. Returns the full history of `Delta f`
    /// (retarded minus advanced solution) and its Cauchy data on the final
    /// slice, where the advanced part has no support.
    pub fn causal_solution(&self, source: &[Vec<f64>]) -> CausalSolution {
        let steps = source.len() - 1;
        let n = self.n_sites;
        let read = |j: usize| DVector::from_column_slice(&source[j]);

        // Retarded pass: zero data before the source window.
        let mut ret = vec![DVector::zeros(n); steps + 1];
        for j in 0..steps {
            let prev = if j == 0 { DVector::zeros(n) } else { ret[j - 1].clone() };
            let acc = -(&self.xi * &ret[j]) + read(j);
            let next = 2.0 * &ret[j] - prev + self.dt * self.dt * acc;
            ret[j + 1] = next;
        }
        // Advanced pass: zero data after the window, run backwards.
        let mut adv = vec![DVector::zeros(n); steps + 1];
        for j in (1..=steps).rev() {
            let next = if j == steps { DVector::zeros(n) } else { adv[j + 1].clone() };
            let acc = -(&self.xi * &adv[j]) + read(j);
            let prev = 2.0 * &adv[j] - next + self.dt * self.dt * acc;
            adv[j - 1] = prev;
        }

        let history: Vec<DVector<f64>> =
            (0..=steps).map(|j| &ret[j] - &adv[j]).collect();
        // Final-slice Cauchy data; one extra source-free step gives the
        // centered velocity.
        let phi = history[steps].clone();
        let acc = -(&self.xi * &phi);
        let extra = 2.0 * &phi - &history[steps - 1] + self.dt * self.dt * acc;
        let pi = (extra - &history[steps - 1]) / (2.0 * self.dt);
        let mut data = DVector::zeros(2 * n);
        for i in 0..n {
            data[i] = phi[i];
            data[n + i] = pi[i];
        }
        CausalSolution { history, data }
    }

    /// `sum_{t, x} f(t, x) g_history(t, x) dt dx`, the spacetime pairing
    /// used to cross-check the symplectic form of two causal solutions.
    pub fn spacetime_pairing(&self, f: &[Vec<f64>], g_history: &[DVector<f64>]) -> f64 {
        let mut acc = 0.0;
        for (j, slice) in f.iter().enumerate() {
            for (i, v) in slice.iter().enumerate() {
                acc += v * g_history[j][i];
            }
        }
        acc * self.dt * self.dx
    }
}

/// Causal propagator output: full history and final-slice Cauchy data.
pub struct CausalSolution {
    pub history: Vec<DVector<f64>>,
    pub data: DVector<f64>,
}

/// Commutator pairing of two causal solutions:
/// `[phi(f1), phi(f2)] = i (-Omega(Delta f1, Delta f2)) 1`.
pub fn causal_pairing(space: &ModeSpace, d1: &DVector<f64>, d2: &DVector<f64>) -> f64 {
    -space.omega_form(d1, d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_saturated(n_modes: usize, seed: u64) -> ModeSpace {
        // Omega = T^t Omega0 T, mu = T^t T / 2 for random invertible T:
        // then J = T^{-1} Omega0 T squares to -1 by construction.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 2 * n_modes;
        loop {
            let t = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            if t.clone().svd(false, false).rank(1e-6) < dim {
                continue;
            }
            let std = ModeSpace::standard(n_modes);
            let omega = t.transpose() * &std.omega * &t;
            let mu = t.transpose() * &t * 0.5;
            // Symmetrize away round-off so the constructor accepts.
            let omega = (&omega - omega.transpose()) * 0.5;
            let mu = (&mu + mu.transpose()) * 0.5;
            return ModeSpace::new(omega, mu).unwrap();
        }
    }

    #[test]
    fn standard_structure_matches_closed_form() {
        let space = ModeSpace::standard(1);
        let ops = space.complex_structure().unwrap();
        // J equals the symplectic matrix itself.
        assert!((ops.complex_structure_matrix() - &space.omega).amax() < 1e-14);
        // K is the single row (1, -i) / sqrt 2.
        let k = ops.projection_matrix();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((k[(0, 0)] - Complex64::new(s, 0.0)).norm() < 1e-14);
        assert!((k[(0, 1)] - Complex64::new(0.0, -s)).norm() < 1e-14);
    }

    #[test]
    fn degenerate_covariance_is_reported() {
        let space = ModeSpace::standard(2);
        let mut mu = space.mu.clone();
        mu[(0, 0)] = 0.0;
        mu[(1, 1)] = 0.0;
        let broken = ModeSpace::new(space.omega.clone(), mu).unwrap();
        match broken.complex_structure() {
            Err(QuantizationError::Degenerate { .. }) => {}
            other => panic!("expected degeneracy error, got {other:?}"),
        }
    }

    #[test]
    fn saturation_accepts_built_metric_and_rejects_doubled() {
        let space = random_saturated(3, 7);
        assert!(space.complex_structure().is_ok());
        let doubled = ModeSpace::new(space.omega.clone(), &space.mu * 2.0).unwrap();
        match doubled.complex_structure() {
            Err(QuantizationError::SaturationViolation { defect }) => {
                assert!(defect > 0.5, "doubling the covariance quarters J^2: {defect}");
            }
            other => panic!("expected saturation violation, got {other:?}"),
        }
    }

    #[test]
    fn projection_identities_hold_on_random_spaces() {
        // 100 random pairs spread over dimensions up to 16.
        let mut pairs_total = 0;
        for (i, &n_modes) in [1, 2, 3, 4, 5, 6, 7, 8].iter().enumerate() {
            let space = random_saturated(n_modes, 100 + i as u64);
            let ops = space.complex_structure().unwrap();
            let report = ops.projection_report(13, 200 + i as u64);
            assert!(report.passes(), "defects at n_modes = {n_modes}: {report:?}");
            pairs_total += 13;
        }
        assert!(pairs_total >= 100);
    }

    #[test]
    fn mode_round_trip_dimension_six() {
        let space = random_saturated(3, 42);
        let ops = space.complex_structure().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let back = ops.cauchy_data(&ops.project(&psi));
        assert!((&back - &psi).amax() < tolerances::STRUCTURE_IDENTITY);
    }

    #[test]
    fn ccr_exact_below_the_ceiling() {
        let fock = TruncatedFock::bosonic(2, DEFAULT_OCCUPATION_CUTOFF);
        for j in 0..2 {
            for k in 0..2 {
                let c = fock.annihilation(j) * fock.creation(k)
                    - fock.creation(k) * fock.annihilation(j);
                let expect = if j == k { 1.0 } else { 0.0 };
                for idx in 0..fock.dim() {
                    if fock.total_occupation(idx) as usize > fock.occupation_cutoff() - 2 {
                        continue;
                    }
                    for row in 0..fock.dim() {
                        let want = if row == idx { expect } else { 0.0 };
                        assert!(
                            (c[(row, idx)] - Complex64::new(want, 0.0)).norm() < 1e-12,
                            "[a_{j}, a^+_{k}] defect on state {idx}"
                        );
                    }
                }
            }
        }
        // At the ceiling the commutator is visibly wrong, which is what the
        // truncation warning announces.
        let c = fock.annihilation(0) * fock.creation(0) - fock.creation(0) * fock.annihilation(0);
        let top = fock.index[&vec![DEFAULT_OCCUPATION_CUTOFF as u32, 0]];
        assert!((c[(top, top)].re - 1.0).abs() > 0.5);
    }

    #[test]
    fn car_exact_at_full_cutoff() {
        let fock = TruncatedFock::fermionic(2);
        assert_eq!(fock.dim(), 4);
        for j in 0..2 {
            for k in 0..2 {
                let anti = fock.annihilation(j) * fock.creation(k)
                    + fock.creation(k) * fock.annihilation(j);
                let want = if j == k { 1.0 } else { 0.0 };
                for r in 0..4 {
                    for c in 0..4 {
                        let expect = if r == c { want } else { 0.0 };
                        assert_eq!(anti[(r, c)], Complex64::new(expect, 0.0));
                    }
                }
                let aa = fock.annihilation(j) * fock.annihilation(k)
                    + fock.annihilation(k) * fock.annihilation(j);
                assert_eq!(aa.map(|z| z.norm()).max(), 0.0);
            }
        }
    }

    #[test]
    fn quasifree_odd_vanishes_and_even_matches_fock_products() {
        let space = random_saturated(3, 11);
        let ops = space.complex_structure().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<DVector<f64>> =
            (0..6).map(|_| DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0))).collect();

        let state = QuasiFreeState::new(space.complex_structure().unwrap(), 1.0).unwrap();
        assert_eq!(state.npoint(&data[..3]), Complex64::new(0.0, 0.0));
        assert_eq!(state.npoint(&data[..5]), Complex64::new(0.0, 0.0));

        // Independent oracle: explicit operator products in a Fock space
        // tall enough that no intermediate state is truncated.
        let fock = TruncatedFock::bosonic(3, 8);
        let field = |d: &DVector<f64>| field_operator(&fock, &ops.project(d)).matrix;
        for len in [2usize, 4, 6] {
            let mut prod = DMatrix::identity(fock.dim(), fock.dim());
            for d in &data[..len] {
                prod = prod * field(d);
            }
            let want = fock.vacuum_expectation(&prod);
            let got = state.npoint(&data[..len]);
            assert!(
                (got - want).norm() < 1e-10,
                "{len}-point: pairing sum {got} vs Fock product {want}"
            );
        }
    }

    #[test]
    fn four_point_is_three_ordered_pairings() {
        let space = random_saturated(2, 19);
        let state = QuasiFreeState::new(space.complex_structure().unwrap(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<DVector<f64>> =
            (0..4).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let w = |i: usize, j: usize| state.two_point(&d[i], &d[j]);
        let want = w(0, 1) * w(2, 3) + w(0, 2) * w(1, 3) + w(0, 3) * w(1, 2);
        assert!((state.npoint(&d) - want).norm() < 1e-13);
    }

    #[test]
    fn fermion_anticommutator_matches_pairing_exactly() {
        let lambda = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(1.3, 0.0),
                Complex64::new(0.2, 0.4),
                Complex64::new(0.2, -0.4),
                Complex64::new(0.9, 0.0),
            ],
        );
        let fs = fermion_structure(lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let v = DVector::from_fn(2, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let u = DVector::from_fn(2, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let anti = fs.psi(&v) * fs.psi_bar(&u) + fs.psi_bar(&u) * fs.psi(&v);
            let want = Complex64::i() * fs.s_pairing(&v, &u);
            for r in 0..4 {
                for c in 0..4 {
                    let expect = if r == c { want } else { Complex64::new(0.0, 0.0) };
                    assert!(
                        (anti[(r, c)] - expect).norm() < 1e-12,
                        "anticommutator is not i S(v, u) times identity"
                    );
                }
            }
        }
        // Indefinite metric is rejected.
        let bad = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(-1.0, 0.0),
            ],
        );
        match fermion_structure(bad) {
            Err(QuantizationError::Degenerate { .. }) => {}
            other => panic!("expected degeneracy error, got {other:?}"),
        }
    }

    fn bump(center: f64, width: f64, t: f64) -> f64 {
        let u = (t - center) / width;
        if u.abs() >= 1.0 { 0.0 } else { (1.0 - u * u).powi(2) }
    }

    #[test]
    fn leapfrog_commutator_matches_causal_pairing() {
        let lattice = LatticeKleinGordon::new(6, 0.5, 1.0);
        let steps = 160;
        let t_total = steps as f64 * lattice.dt();
        // Two spacetime bumps separated in time and space, supported well
        // inside the window.
        let f1: Vec<Vec<f64>> = (0..=steps)
            .map(|j| {
                let t = j as f64 * lattice.dt();
                (0..6)
                    .map(|i| bump(0.3 * t_total, 0.15 * t_total, t) * bump(1.0, 1.2, i as f64 * 0.5))
                    .collect()
            })
            .collect();
        let f2: Vec<Vec<f64>> = (0..=steps)
            .map(|j| {
                let t = j as f64 * lattice.dt();
                (0..6)
                    .map(|i| bump(0.6 * t_total, 0.2 * t_total, t) * bump(2.0, 1.0, i as f64 * 0.5))
                    .collect()
            })
            .collect();

        let s1 = lattice.causal_solution(&f1);
        let s2 = lattice.causal_solution(&f2);
        let space = lattice.mode_space();
        let pairing = causal_pairing(&space, &s1.data, &s2.data);

        // Independent spacetime-integral identity for the causal kernel:
        // -Omega(Delta f1, Delta f2) = int f1 (Delta f2).
        let integral = lattice.spacetime_pairing(&f1, &s2.history);
        assert!(
            (pairing - integral).abs() < 2e-3 * integral.abs().max(1.0),
            "pairing {pairing} vs spacetime integral {integral}"
        );

        // Operator commutator on the truncated Fock space: exact multiple
        // of the identity below the ceiling.
        let ops = space.complex_structure().unwrap();
        let fock = TruncatedFock::bosonic(6, 3);
        let op1 = field_operator(&fock, &ops.project(&s1.data));
        let op2 = field_operator(&fock, &ops.project(&s2.data));
        assert!(op1.truncated && op1.truncation_loss > 0.0);
        let comm = &op1.matrix * &op2.matrix - &op2.matrix * &op1.matrix;
        let want = Complex64::i() * pairing;
        for idx in 0..fock.dim() {
            if fock.total_occupation(idx) as usize > fock.occupation_cutoff() - 2 {
                continue;
            }
            for row in 0..fock.dim() {
                let expect = if row == idx { want } else { Complex64::new(0.0, 0.0) };
                assert!(
                    (comm[(row, idx)] - expect).norm() < 1e-10 * (1.0 + want.norm()),
                    "commutator defect at column {idx}"
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_saturated_pairs_accept_and_verify(seed in 0u64..500, n_modes in 1usize..5) {
            let space = random_saturated(n_modes, seed);
            let ops = space.complex_structure().unwrap();
            let report = ops.projection_report(3, seed ^ 0x5eed);
            prop_assert!(report.passes());
        }

        #[test]
        fn pairing_enumeration_has_double_factorial_terms(n_pairs in 1usize..5) {
            // With all two-point values set to one, the pairing sum counts
            // the perfect matchings of 2k elements: (2k - 1)!!.
            let n = 2 * n_pairs;
            let omega = DMatrix::from_element(n, n, Complex64::new(1.0, 0.0));
            let got = sum_over_pairings(&omega, &(0..n).collect::<Vec<_>>());
            let want: f64 = (1..=n_pairs).map(|k| (2 * k - 1) as f64).product();
            prop_assert!((got.re - want).abs() < 1e-9 && got.im.abs() < 1e-12);
        }
    }
}
