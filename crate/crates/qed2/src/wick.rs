//! Normal-ordered monomial algebra: contracted tensor products, the
//! product formula for ordered monomials, ordering-basis rewrites, and
//! vertex two-point values with norm bounds.
//!
//! Combinatorial factors are exact rationals throughout; complex numbers
//! enter only when a kernel is evaluated at points. Monomials reference
//! spacetime points through abstract slot indices, so products of
//! monomials live over the joint slot context of their operands.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::Point;

/// Highest derivative order a field label may carry.
pub const MAX_DERIVATIVE_ORDER: u32 = 2;

#[derive(Debug, Error)]
pub enum WickError {
    #[error("slot indices must be contiguous from 1, got {0:?}")]
    SlotNumbering(Vec<usize>),
    #[error("derivative order {0} exceeds the supported maximum {MAX_DERIVATIVE_ORDER}")]
    DerivativeOrder(u32),
    #[error("tensor index {0} out of range for two dimensions")]
    TensorIndex(u8),
    #[error("ordering kernels differ: {left:?} vs {right:?}")]
    KernelMismatch { left: OrderingTag, right: OrderingTag },
    #[error("ordering rewrite would evaluate the kernel on the diagonal at slot {slot}")]
    OnDiagonal { slot: usize },
    #[error("fermionic factors are supported as bilinears only")]
    UnsupportedFermion,
    #[error("kernel is not finite at the requested point pair")]
    SingularKernel,
}

/// Field species carried by a monomial factor. The two spinor components
/// are separate ids so that bilinears can track ordering signs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum FieldId {
    Sigma,
    Eta,
    Phi,
    PsiComponent(u8),
}

impl FieldId {
    pub fn is_fermionic(self) -> bool {
        matches!(self, FieldId::PsiComponent(_))
    }

    fn symbol(self) -> String {
        match self {
            FieldId::Sigma => "Sigma".to_string(),
            FieldId::Eta => "eta".to_string(),
            FieldId::Phi => "phi".to_string(),
            FieldId::PsiComponent(c) => format!("psi{c}"),
        }
    }
}

/// One field factor: species, explicit coordinate derivatives, and an
/// optional single tensor-indexed derivative which is either the plain
/// gradient or its dual rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct FieldLabel {
    pub field: FieldId,
    /// Coordinate derivative multi-index `(d/dx0)^a (d/dx1)^b`.
    pub derivative: [u32; 2],
    /// Tensor index of the leading first-order derivative, if any.
    pub tensor_index: Option<u8>,
    /// When a tensor index is present, apply the dual derivative
    /// (the rotated gradient) instead of the plain one.
    pub dual: bool,
}

impl FieldLabel {
    pub fn new(
        field: FieldId,
        derivative: [u32; 2],
        tensor_index: Option<u8>,
        dual: bool,
    ) -> Result<FieldLabel, WickError> {
        let order = derivative[0] + derivative[1] + u32::from(tensor_index.is_some());
        if order > MAX_DERIVATIVE_ORDER {
            return Err(WickError::DerivativeOrder(order));
        }
        if let Some(mu) = tensor_index {
            if mu > 1 {
                return Err(WickError::TensorIndex(mu));
            }
        }
        Ok(FieldLabel {
            field,
            derivative,
            tensor_index,
            dual,
        })
    }

    /// Bare field with no derivatives.
    pub fn plain(field: FieldId) -> FieldLabel {
        FieldLabel {
            field,
            derivative: [0, 0],
            tensor_index: None,
            dual: false,
        }
    }

    /// Dual first derivative with the given tensor index.
    pub fn dual_gradient(field: FieldId, mu: u8) -> Result<FieldLabel, WickError> {
        FieldLabel::new(field, [0, 0], Some(mu), true)
    }

    pub fn is_fermionic(&self) -> bool {
        self.field.is_fermionic()
    }
}

impl fmt::Display for FieldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(mu) = self.tensor_index {
            write!(f, "{}{}_", if self.dual { "dt" } else { "d" }, mu)?;
        }
        for (axis, &count) in self.derivative.iter().enumerate() {
            match count {
                0 => {}
                1 => write!(f, "d{axis} ")?,
                _ => write!(f, "d{axis}^{count} ")?,
            }
        }
        write!(f, "{}", self.field.symbol())
    }
}

/// Which two-point kernel a monomial is ordered against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum OrderingTag {
    /// Ordered against the state two-point kernel.
    Omega,
    /// Ordered against the geometric parametrix kernel.
    Hadamard,
    /// Plain operator product, no ordering applied.
    Unordered,
}

impl OrderingTag {
    fn kernel_symbol(self) -> &'static str {
        match self {
            OrderingTag::Omega => "om",
            OrderingTag::Hadamard => "H",
            OrderingTag::Unordered => "k",
        }
    }
}

/// A single kernel insertion pairing two labelled factors at two slots.
/// Orientation is by operand position (left factor came first), so
/// kernels without exchange symmetry keep their argument order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct KernelFactor {
    pub left_label: FieldLabel,
    pub left_slot: usize,
    pub right_label: FieldLabel,
    pub right_slot: usize,
}

impl KernelFactor {
    fn display(&self, tag: OrderingTag) -> String {
        let fmt_end = |label: &FieldLabel, slot: usize| {
            let text = label.to_string();
            if text == label.field.symbol() && label.derivative == [0, 0] {
                format!("x{slot}")
            } else {
                format!("{text} x{slot}")
            }
        };
        format!(
            "{}[{}, {}]",
            tag.kernel_symbol(),
            fmt_end(&self.left_label, self.left_slot),
            fmt_end(&self.right_label, self.right_slot)
        )
    }
}

/// Ordered product of labelled field factors at point slots. Repeating a
/// slot realizes powers of the field at one point without ever evaluating
/// an ordering kernel on the diagonal.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WickMonomial {
    ordering: OrderingTag,
    factors: Vec<(FieldLabel, usize)>,
}

impl WickMonomial {
    /// Build a monomial and validate the slot numbering: the set of slots
    /// used must be exactly `1..=max`. Fermionic factors are restricted to
    /// bilinears.
    pub fn new(
        ordering: OrderingTag,
        factors: Vec<(FieldLabel, usize)>,
    ) -> Result<WickMonomial, WickError> {
        let mut slots: Vec<usize> = factors.iter().map(|&(_, s)| s).collect();
        slots.sort_unstable();
        slots.dedup();
        for (pos, &slot) in slots.iter().enumerate() {
            if slot != pos + 1 {
                return Err(WickError::SlotNumbering(
                    factors.iter().map(|&(_, s)| s).collect(),
                ));
            }
        }
        let fermions = factors.iter().filter(|(l, _)| l.is_fermionic()).count();
        if fermions > 2 {
            return Err(WickError::UnsupportedFermion);
        }
        Ok(WickMonomial { ordering, factors })
    }

    /// Identity monomial (degree zero).
    pub fn identity(ordering: OrderingTag) -> WickMonomial {
        WickMonomial {
            ordering,
            factors: Vec::new(),
        }
    }

    /// Power of a single field at one slot, realized as a repeated slot.
    pub fn power(
        ordering: OrderingTag,
        label: FieldLabel,
        slot: usize,
        exponent: usize,
    ) -> Result<WickMonomial, WickError> {
        WickMonomial::new(ordering, vec![(label, slot); exponent])
    }

    fn raw(ordering: OrderingTag, factors: Vec<(FieldLabel, usize)>) -> WickMonomial {
        WickMonomial { ordering, factors }
    }

    pub fn ordering(&self) -> OrderingTag {
        self.ordering
    }

    pub fn factors(&self) -> &[(FieldLabel, usize)] {
        &self.factors
    }

    /// Number of field factors (tensor degree).
    pub fn degree(&self) -> usize {
        self.factors.len()
    }

    /// Highest slot index referenced; slots are contiguous for
    /// constructor-built monomials, so this is also the point count.
    pub fn point_count(&self) -> usize {
        self.factors.iter().map(|&(_, s)| s).max().unwrap_or(0)
    }

    /// Sort factors into canonical order, tracking the sign generated by
    /// transpositions of fermionic factors.
    fn canonical(mut self) -> (i32, WickMonomial) {
        let mut sign = 1i32;
        let n = self.factors.len();
        for i in 0..n {
            for j in (1..n - i).rev() {
                let a = (self.factors[j - 1].1, self.factors[j - 1].0);
                let b = (self.factors[j].1, self.factors[j].0);
                if a > b {
                    if self.factors[j - 1].0.is_fermionic() && self.factors[j].0.is_fermionic() {
                        sign = -sign;
                    }
                    self.factors.swap(j - 1, j);
                }
            }
        }
        (sign, self)
    }
}

impl fmt::Display for WickMonomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return write!(f, "1");
        }
        let ordered = !matches!(self.ordering, OrderingTag::Unordered);
        if ordered {
            write!(f, ":")?;
        }
        let mut i = 0;
        let mut first = true;
        while i < self.factors.len() {
            let (label, slot) = &self.factors[i];
            let mut run = 1;
            while i + run < self.factors.len() && self.factors[i + run] == self.factors[i] {
                run += 1;
            }
            if !first {
                write!(f, " ")?;
            }
            first = false;
            if run == 1 {
                write!(f, "{label}(x{slot})")?;
            } else {
                write!(f, "{label}^{run}(x{slot})")?;
            }
            i += run;
        }
        if ordered {
            write!(f, ":_{}", self.ordering.kernel_symbol())?;
        }
        Ok(())
    }
}

/// One polynomial term: an exact rational coefficient, a product of
/// kernel insertions, and a monomial.
#[derive(Clone, Debug, PartialEq)]
pub struct WickTerm {
    pub coefficient: BigRational,
    pub kernels: Vec<KernelFactor>,
    pub monomial: WickMonomial,
}

/// Linear combination of monomials over one ordering tag, with exact
/// rational coefficients times products of kernel insertions. Like terms
/// are merged and zero coefficients pruned on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct WickPolynomial {
    ordering: OrderingTag,
    terms: Vec<WickTerm>,
}

impl WickPolynomial {
    pub fn zero(ordering: OrderingTag) -> WickPolynomial {
        WickPolynomial {
            ordering,
            terms: Vec::new(),
        }
    }

    pub fn from_monomial(monomial: WickMonomial) -> WickPolynomial {
        let ordering = monomial.ordering();
        WickPolynomial::from_terms(
            ordering,
            vec![WickTerm {
                coefficient: BigRational::one(),
                kernels: Vec::new(),
                monomial,
            }],
        )
    }

    /// Normalize a term list: canonical factor order (with fermionic
    /// signs), sorted kernel lists, merged like terms, pruned zeros.
    pub fn from_terms(ordering: OrderingTag, terms: Vec<WickTerm>) -> WickPolynomial {
        let mut merged: BTreeMap<(Vec<KernelFactor>, Vec<(FieldLabel, usize)>), BigRational> =
            BTreeMap::new();
        for term in terms {
            let (sign, monomial) = term.monomial.canonical();
            let mut kernels = term.kernels;
            kernels.sort();
            let mut coeff = term.coefficient;
            if sign < 0 {
                coeff = -coeff;
            }
            let entry = merged
                .entry((kernels, monomial.factors))
                .or_insert_with(BigRational::zero);
            *entry += coeff;
        }
        let terms = merged
            .into_iter()
            .filter(|(_, c)| !c.is_zero())
            .map(|((kernels, factors), coefficient)| WickTerm {
                coefficient,
                kernels,
                monomial: WickMonomial::raw(ordering, factors),
            })
            .collect();
        WickPolynomial { ordering, terms }
    }

    pub fn ordering(&self) -> OrderingTag {
        self.ordering
    }

    pub fn terms(&self) -> &[WickTerm] {
        &self.terms
    }

    pub fn add(&self, other: &WickPolynomial) -> Result<WickPolynomial, WickError> {
        if self.ordering != other.ordering {
            return Err(WickError::KernelMismatch {
                left: self.ordering,
                right: other.ordering,
            });
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(WickPolynomial::from_terms(self.ordering, terms))
    }

    pub fn scale(&self, factor: &BigRational) -> WickPolynomial {
        let terms = self
            .terms
            .iter()
            .map(|t| WickTerm {
                coefficient: t.coefficient.clone() * factor.clone(),
                kernels: t.kernels.clone(),
                monomial: t.monomial.clone(),
            })
            .collect();
        WickPolynomial::from_terms(self.ordering, terms)
    }

    /// Coefficient of the identity monomial: the expectation value in the
    /// quasi-free state whose two-point kernel matches the ordering tag.
    pub fn vacuum_expectation(&self) -> KernelExpression {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.monomial.degree() == 0)
            .map(|t| (t.coefficient.clone(), t.kernels.clone()))
            .collect();
        KernelExpression::from_terms(terms)
    }

    /// JSON dump of the term list for golden-file comparisons. Rationals
    /// are rendered as strings so the dump stays exact.
    pub fn dump(&self) -> PolynomialDump {
        PolynomialDump {
            schema: 1,
            ordering: format!("{:?}", self.ordering),
            terms: self
                .terms
                .iter()
                .map(|t| TermDump {
                    coefficient: t.coefficient.to_string(),
                    kernels: t
                        .kernels
                        .iter()
                        .map(|k| KernelDump {
                            left: FactorDump {
                                label: k.left_label.to_string(),
                                slot: k.left_slot,
                            },
                            right: FactorDump {
                                label: k.right_label.to_string(),
                                slot: k.right_slot,
                            },
                        })
                        .collect(),
                    factors: t
                        .monomial
                        .factors()
                        .iter()
                        .map(|(label, slot)| FactorDump {
                            label: label.to_string(),
                            slot: *slot,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PolynomialDump {
    pub schema: u32,
    pub ordering: String,
    pub terms: Vec<TermDump>,
}

#[derive(Debug, Serialize)]
pub struct TermDump {
    pub coefficient: String,
    pub kernels: Vec<KernelDump>,
    pub factors: Vec<FactorDump>,
}

#[derive(Debug, Serialize)]
pub struct KernelDump {
    pub left: FactorDump,
    pub right: FactorDump,
}

#[derive(Debug, Serialize)]
pub struct FactorDump {
    pub label: String,
    pub slot: usize,
}

impl fmt::Display for WickPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, term) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            let mut pieces = Vec::new();
            if !term.coefficient.is_one() || (term.kernels.is_empty() && term.monomial.degree() == 0)
            {
                pieces.push(format!("({})", term.coefficient));
            }
            let mut j = 0;
            while j < term.kernels.len() {
                let mut run = 1;
                while j + run < term.kernels.len() && term.kernels[j + run] == term.kernels[j] {
                    run += 1;
                }
                let base = term.kernels[j].display(self.ordering);
                if run == 1 {
                    pieces.push(base);
                } else {
                    pieces.push(format!("{base}^{run}"));
                }
                j += run;
            }
            if term.monomial.degree() > 0 {
                pieces.push(term.monomial.to_string());
            } else if !term.kernels.is_empty() && term.coefficient.is_one() {
                // Coefficient already carried by the kernel product.
            }
            write!(f, "{}", pieces.join(" "))?;
        }
        Ok(())
    }
}

/// Sum of exact rational multiples of kernel-insertion products; the
/// symbolic value of an expectation. Normalized: sorted kernel lists,
/// merged, zero-free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelExpression {
    terms: Vec<(BigRational, Vec<KernelFactor>)>,
}

impl KernelExpression {
    pub fn zero() -> KernelExpression {
        KernelExpression { terms: Vec::new() }
    }

    pub fn from_terms(terms: Vec<(BigRational, Vec<KernelFactor>)>) -> KernelExpression {
        let mut merged: BTreeMap<Vec<KernelFactor>, BigRational> = BTreeMap::new();
        for (coeff, mut kernels) in terms {
            kernels.sort();
            *merged.entry(kernels).or_insert_with(BigRational::zero) += coeff;
        }
        KernelExpression {
            terms: merged
                .into_iter()
                .filter(|(_, c)| !c.is_zero())
                .map(|(k, c)| (c, k))
                .collect(),
        }
    }

    pub fn terms(&self) -> &[(BigRational, Vec<KernelFactor>)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Evaluate by substituting a numeric value for each kernel factor.
    pub fn evaluate(&self, kernel: &dyn Fn(&KernelFactor) -> Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (coeff, kernels) in &self.terms {
            let mut value = Complex64::new(rational_to_f64(coeff), 0.0);
            for k in kernels {
                value *= kernel(k);
            }
            acc += value;
        }
        acc
    }
}

fn rational_to_f64(r: &BigRational) -> f64 {
    let numer = r.numer().to_string().parse::<f64>().unwrap_or(f64::NAN);
    let denom = r.denom().to_string().parse::<f64>().unwrap_or(f64::NAN);
    numer / denom
}

fn factorial(n: usize) -> BigInt {
    let mut acc = BigInt::one();
    for i in 2..=n {
        acc *= BigInt::from(i);
    }
    acc
}

/// Combinatorial weight of the k-fold contraction of an n-slot and an
/// m-slot symmetric tensor: `n! m! / ((n-k)! (m-k)! k!)`, which counts
/// the ordered k-matchings between the two factor lists.
pub fn contraction_factor(n: usize, m: usize, k: usize) -> BigRational {
    if k > n.min(m) {
        return BigRational::zero();
    }
    let numer = factorial(n) * factorial(m);
    let denom = factorial(n - k) * factorial(m - k) * factorial(k);
    BigRational::new(numer, denom)
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &head) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// k-fold contracted product of two monomials sharing an ordering tag:
/// the sum over all matchings of k factors from each side, each matching
/// contributing its kernel insertions and the surviving factors. Merging
/// like terms reproduces the closed-form combinatorial factor. Returns
/// the zero polynomial when k exceeds either degree. The second operand's
/// slots are shifted past the first operand's, so the result lives over
/// the joint slot context.
pub fn contract(
    a: &WickMonomial,
    b: &WickMonomial,
    k: usize,
) -> Result<WickPolynomial, WickError> {
    contract_with_shift(a, b, k, a.point_count())
}

/// Contraction with an explicit slot shift for the second operand, used
/// when the first operand is part of a term whose kernel factors already
/// occupy slots beyond its monomial.
fn contract_with_shift(
    a: &WickMonomial,
    b: &WickMonomial,
    k: usize,
    shift: usize,
) -> Result<WickPolynomial, WickError> {
    if a.ordering() != b.ordering() {
        return Err(WickError::KernelMismatch {
            left: a.ordering(),
            right: b.ordering(),
        });
    }
    let ordering = a.ordering();
    let (n, m) = (a.degree(), b.degree());
    if k > n.min(m) {
        return Ok(WickPolynomial::zero(ordering));
    }
    if a.factors().iter().any(|(l, _)| l.is_fermionic())
        || b.factors().iter().any(|(l, _)| l.is_fermionic())
    {
        if k > 0 {
            return Err(WickError::UnsupportedFermion);
        }
    }
    let mut terms = Vec::new();
    for left_set in k_subsets(n, k) {
        for right_set in k_subsets(m, k) {
            for right_order in permutations(&right_set) {
                let mut kernels = Vec::with_capacity(k);
                for (pos, &i) in left_set.iter().enumerate() {
                    let j = right_order[pos];
                    let (ll, ls) = a.factors()[i];
                    let (rl, rs) = b.factors()[j];
                    kernels.push(KernelFactor {
                        left_label: ll,
                        left_slot: ls,
                        right_label: rl,
                        right_slot: rs + shift,
                    });
                }
                let mut factors = Vec::with_capacity(n + m - 2 * k);
                for (i, &(label, slot)) in a.factors().iter().enumerate() {
                    if !left_set.contains(&i) {
                        factors.push((label, slot));
                    }
                }
                for (j, &(label, slot)) in b.factors().iter().enumerate() {
                    if !right_set.contains(&j) {
                        factors.push((label, slot + shift));
                    }
                }
                terms.push(WickTerm {
                    coefficient: BigRational::one(),
                    kernels,
                    monomial: WickMonomial::raw(ordering, factors),
                });
            }
        }
    }
    Ok(WickPolynomial::from_terms(ordering, terms))
}

/// Product of two ordered polynomials: the sum over all contraction
/// orders of the two factor lists. Unordered operands multiply by plain
/// juxtaposition. Mismatched ordering tags are an error.
pub fn wick_product(
    a: &WickPolynomial,
    b: &WickPolynomial,
) -> Result<WickPolynomial, WickError> {
    if a.ordering() != b.ordering() {
        return Err(WickError::KernelMismatch {
            left: a.ordering(),
            right: b.ordering(),
        });
    }
    let ordering = a.ordering();
    let mut terms = Vec::new();
    for ta in a.terms() {
        for tb in b.terms() {
            // Shift past every slot the left term touches, including
            // slots referenced only by its kernel factors.
            let shift = ta
                .kernels
                .iter()
                .flat_map(|kf| [kf.left_slot, kf.right_slot])
                .chain(std::iter::once(ta.monomial.point_count()))
                .max()
                .unwrap_or(0);
            let k_max = if matches!(ordering, OrderingTag::Unordered) {
                0
            } else {
                ta.monomial.degree().min(tb.monomial.degree())
            };
            for k in 0..=k_max {
                let part = contract_with_shift(&ta.monomial, &tb.monomial, k, shift)?;
                for term in part.terms() {
                    let mut kernels = ta.kernels.clone();
                    for kf in &tb.kernels {
                        kernels.push(KernelFactor {
                            left_label: kf.left_label,
                            left_slot: kf.left_slot + shift,
                            right_label: kf.right_label,
                            right_slot: kf.right_slot + shift,
                        });
                    }
                    kernels.extend(term.kernels.iter().cloned());
                    terms.push(WickTerm {
                        coefficient: ta.coefficient.clone()
                            * tb.coefficient.clone()
                            * term.coefficient.clone(),
                        kernels,
                        monomial: term.monomial.clone(),
                    });
                }
            }
        }
    }
    Ok(WickPolynomial::from_terms(ordering, terms))
}

fn partial_pairings(indices: &[usize]) -> Vec<(Vec<(usize, usize)>, Vec<usize>)> {
    if indices.is_empty() {
        return vec![(Vec::new(), Vec::new())];
    }
    let first = indices[0];
    let rest = &indices[1..];
    let mut out = Vec::new();
    // First index left unpaired.
    for (pairs, mut unpaired) in partial_pairings(rest) {
        unpaired.insert(0, first);
        out.push((pairs, unpaired));
    }
    // First index paired with each later one.
    for (pos, &other) in rest.iter().enumerate() {
        let mut remaining = rest.to_vec();
        remaining.remove(pos);
        for (mut pairs, unpaired) in partial_pairings(&remaining) {
            pairs.insert(0, (first, other));
            out.push((pairs, unpaired));
        }
    }
    out
}

/// Rewrite a plain (unordered) monomial in the ordered basis for the
/// requested kernel: the sum over partial pairings of the factors, each
/// pairing inserting one kernel factor. A pairing that would land both
/// ends on the same slot is an on-diagonal evaluation and is rejected;
/// powers at a point enter the ordered basis directly via repeated slots
/// instead.
pub fn normal_order(
    plain: &WickMonomial,
    target: OrderingTag,
) -> Result<WickPolynomial, WickError> {
    rewrite_between_bases(plain, OrderingTag::Unordered, target, false)
}

/// Inverse rewrite: expand an ordered monomial back into plain products.
/// Each pairing carries a minus sign per kernel insertion, so the round
/// trip through `normal_order` is the identity.
pub fn normal_order_inverse(ordered: &WickMonomial) -> Result<WickPolynomial, WickError> {
    let source = ordered.ordering();
    if matches!(source, OrderingTag::Unordered) {
        return Err(WickError::KernelMismatch {
            left: source,
            right: OrderingTag::Unordered,
        });
    }
    rewrite_between_bases(ordered, source, OrderingTag::Unordered, true)
}

fn rewrite_between_bases(
    monomial: &WickMonomial,
    expect: OrderingTag,
    target: OrderingTag,
    negate: bool,
) -> Result<WickPolynomial, WickError> {
    if monomial.ordering() != expect {
        return Err(WickError::KernelMismatch {
            left: monomial.ordering(),
            right: expect,
        });
    }
    if monomial.factors().iter().any(|(l, _)| l.is_fermionic()) && monomial.degree() > 2 {
        return Err(WickError::UnsupportedFermion);
    }
    let indices: Vec<usize> = (0..monomial.degree()).collect();
    let mut terms = Vec::new();
    for (pairs, unpaired) in partial_pairings(&indices) {
        let mut kernels = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            let (li, si) = monomial.factors()[i];
            let (lj, sj) = monomial.factors()[j];
            if li.is_fermionic() || lj.is_fermionic() {
                return Err(WickError::UnsupportedFermion);
            }
            if si == sj {
                return Err(WickError::OnDiagonal { slot: si });
            }
            kernels.push(KernelFactor {
                left_label: li,
                left_slot: si,
                right_label: lj,
                right_slot: sj,
            });
        }
        let factors: Vec<(FieldLabel, usize)> = unpaired
            .iter()
            .map(|&i| monomial.factors()[i])
            .collect();
        let mut coefficient = BigRational::one();
        if negate && pairs.len() % 2 == 1 {
            coefficient = -coefficient;
        }
        terms.push(WickTerm {
            coefficient,
            kernels,
            monomial: WickMonomial::raw(target, factors),
        });
    }
    Ok(WickPolynomial::from_terms(target, terms))
}

/// Substitute an ordered-basis rewrite into every term of a polynomial
/// over plain monomials, or the inverse direction. Used for round-trip
/// checks: rewriting and substituting back must reproduce the input.
pub fn substitute_inverse(poly: &WickPolynomial) -> Result<WickPolynomial, WickError> {
    let mut acc = WickPolynomial::zero(OrderingTag::Unordered);
    for term in poly.terms() {
        let expanded = normal_order_inverse(&term.monomial)?;
        let scaled = expanded.scale(&term.coefficient);
        let mut terms = Vec::new();
        for t in scaled.terms() {
            let mut kernels = term.kernels.clone();
            kernels.extend(t.kernels.iter().cloned());
            terms.push(WickTerm {
                coefficient: t.coefficient.clone(),
                kernels,
                monomial: t.monomial.clone(),
            });
        }
        acc = acc.add(&WickPolynomial::from_terms(OrderingTag::Unordered, terms))?;
    }
    Ok(acc)
}

/// Evaluatable two-point kernel: a base evaluator plus a sign flag. The
/// flipped-sign field pairs through the negated kernel, which is what
/// makes its vertex correlators reciprocal to the base ones.
#[derive(Clone)]
pub struct TwoPointKernel {
    ordering: OrderingTag,
    sign: f64,
    eval: Arc<dyn Fn(Point, Point) -> Complex64 + Send + Sync>,
}

impl TwoPointKernel {
    pub fn new(
        ordering: OrderingTag,
        eval: Arc<dyn Fn(Point, Point) -> Complex64 + Send + Sync>,
    ) -> TwoPointKernel {
        TwoPointKernel {
            ordering,
            sign: 1.0,
            eval,
        }
    }

    /// Constant kernel, mainly for algebraic tests.
    pub fn constant(ordering: OrderingTag, value: Complex64) -> TwoPointKernel {
        TwoPointKernel::new(ordering, Arc::new(move |_, _| value))
    }

    /// Same kernel with the sign flag flipped.
    pub fn flipped(&self) -> TwoPointKernel {
        TwoPointKernel {
            ordering: self.ordering,
            sign: -self.sign,
            eval: Arc::clone(&self.eval),
        }
    }

    pub fn ordering(&self) -> OrderingTag {
        self.ordering
    }

    pub fn sign(&self) -> f64 {
        self.sign
    }

    pub fn value(&self, x: Point, xp: Point) -> Complex64 {
        (self.eval)(x, xp) * self.sign
    }
}

/// Two-point function of vertex operators with charges `g1`, `g2`:
/// the exponential of `g1 g2` times the kernel value.
pub fn vertex_two_point(
    g1: Complex64,
    g2: Complex64,
    kernel: &TwoPointKernel,
    x1: Point,
    x2: Point,
) -> Result<Complex64, WickError> {
    let value = kernel.value(x1, x2);
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(WickError::SingularKernel);
    }
    Ok((g1 * g2 * value).exp())
}

/// Truncated power series for the vertex two-point value through the
/// given order, together with a bound on the omitted tail: the first
/// omitted term inflated by the geometric remainder factor
/// `1 / (1 - |z|/(order+2))`, valid while `|z| < order + 2`.
pub fn vertex_two_point_truncated(
    g1: Complex64,
    g2: Complex64,
    kernel: &TwoPointKernel,
    x1: Point,
    x2: Point,
    order: usize,
) -> Result<(Complex64, f64), WickError> {
    let value = kernel.value(x1, x2);
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(WickError::SingularKernel);
    }
    let z = g1 * g2 * value;
    let mut sum = Complex64::new(1.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    for n in 1..=order {
        term *= z / n as f64;
        sum += term;
    }
    let first_omitted = term.norm() * z.norm() / (order as f64 + 1.0);
    let ratio = z.norm() / (order as f64 + 2.0);
    let bound = if ratio < 1.0 {
        first_omitted / (1.0 - ratio)
    } else {
        f64::INFINITY
    };
    Ok((sum, bound))
}

/// One quadrature level for the vertex norm bound: sample values of the
/// smearing function, weights, and the kernel matrix on the same grid.
pub struct VertexGridLevel {
    pub f: Vec<Complex64>,
    pub weights: Vec<f64>,
    pub kernel: DMatrix<Complex64>,
}

/// Quadrature value of the vertex norm majorant
/// `sum_ij w_i conj(f_i) exp(|alpha|^2 K_ij) w_j f_j` on one grid level.
pub fn vertex_norm_quadrature(alpha: Complex64, level: &VertexGridLevel) -> Complex64 {
    let n = level.f.len();
    assert_eq!(level.weights.len(), n);
    assert_eq!(level.kernel.nrows(), n);
    assert_eq!(level.kernel.ncols(), n);
    let a2 = alpha.norm_sqr();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let factor = (level.kernel[(i, j)] * a2).exp();
            acc += level.weights[i] * level.f[i].conj() * factor * level.weights[j] * level.f[j];
        }
    }
    acc
}

/// Norm-bound report across refinement levels. `finite` records whether
/// the quadrature settled: the last refinement changed the value by less
/// than five percent. A divergent majorant keeps growing under
/// refinement and is flagged, not errored.
pub struct VertexNormBound {
    pub values: Vec<f64>,
    pub value: f64,
    pub finite: bool,
}

pub fn vertex_norm_bound(alpha: Complex64, levels: &[VertexGridLevel]) -> VertexNormBound {
    let values: Vec<f64> = levels
        .iter()
        .map(|level| vertex_norm_quadrature(alpha, level).re)
        .collect();
    let value = *values.last().expect("at least one level");
    let finite = if values.len() < 2 {
        true
    } else {
        let prev = values[values.len() - 2];
        (value - prev).abs() <= 0.05 * value.abs().max(1e-300)
    };
    VertexNormBound {
        values,
        value,
        finite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phi() -> FieldLabel {
        FieldLabel::plain(FieldId::Phi)
    }

    fn mono(ordering: OrderingTag, slots: &[usize]) -> WickMonomial {
        WickMonomial::new(ordering, slots.iter().map(|&s| (phi(), s)).collect()).unwrap()
    }

    #[test]
    fn slot_numbering_is_validated() {
        assert!(WickMonomial::new(OrderingTag::Omega, vec![(phi(), 1), (phi(), 3)]).is_err());
        assert!(WickMonomial::new(OrderingTag::Omega, vec![(phi(), 2)]).is_err());
        assert!(WickMonomial::new(OrderingTag::Omega, vec![(phi(), 1), (phi(), 1)]).is_ok());
    }

    #[test]
    fn derivative_order_is_capped() {
        assert!(FieldLabel::new(FieldId::Phi, [2, 1], None, false).is_err());
        assert!(FieldLabel::new(FieldId::Phi, [1, 1], None, false).is_ok());
        assert!(FieldLabel::new(FieldId::Phi, [1, 1], Some(0), true).is_err());
    }

    #[test]
    fn single_contraction_has_unit_factor() {
        let a = mono(OrderingTag::Omega, &[1]);
        let b = mono(OrderingTag::Omega, &[1]);
        let result = contract(&a, &b, 1).unwrap();
        assert_eq!(result.terms().len(), 1);
        let term = &result.terms()[0];
        assert_eq!(term.coefficient, BigRational::one());
        assert_eq!(term.kernels.len(), 1);
        assert_eq!(term.kernels[0].left_slot, 1);
        assert_eq!(term.kernels[0].right_slot, 2);
        assert_eq!(term.monomial.degree(), 0);
    }

    #[test]
    fn repeated_slot_contraction_merges_to_the_closed_form_factor() {
        // Both sides are squares at one point, so all four single
        // matchings give the same kernel factor and merge.
        let a = mono(OrderingTag::Omega, &[1, 1]);
        let b = mono(OrderingTag::Omega, &[1, 1]);
        let result = contract(&a, &b, 1).unwrap();
        assert_eq!(result.terms().len(), 1);
        assert_eq!(
            result.terms()[0].coefficient,
            BigRational::from(BigInt::from(4))
        );
        assert_eq!(result.terms()[0].monomial.degree(), 2);
    }

    #[test]
    fn over_contraction_is_zero() {
        let a = mono(OrderingTag::Omega, &[1, 1]);
        let b = mono(OrderingTag::Omega, &[1, 1]);
        let result = contract(&a, &b, 3).unwrap();
        assert!(result.terms().is_empty());
    }

    #[test]
    fn contraction_factor_counts_ordered_matchings() {
        // Independent count: distinct-point contraction produces one term
        // per ordered matching, each with unit coefficient, so the total
        // weight must equal the closed-form factor.
        for n in 0..=6usize {
            for m in 0..=6usize {
                for k in 0..=n.min(m) {
                    let a = mono(OrderingTag::Omega, &(1..=n.max(1)).collect::<Vec<_>>()[..n]);
                    let b = mono(OrderingTag::Omega, &(1..=m.max(1)).collect::<Vec<_>>()[..m]);
                    let result = contract(&a, &b, k).unwrap();
                    let total: BigRational = result
                        .terms()
                        .iter()
                        .map(|t| t.coefficient.clone())
                        .sum();
                    assert_eq!(total, contraction_factor(n, m, k), "n={n} m={m} k={k}");
                }
            }
        }
    }

    #[test]
    fn product_of_two_linear_factors() {
        let a = WickPolynomial::from_monomial(mono(OrderingTag::Omega, &[1]));
        let b = WickPolynomial::from_monomial(mono(OrderingTag::Omega, &[1]));
        let product = wick_product(&a, &b).unwrap();
        // :phi(x): :phi(y): = :phi(x) phi(y): + om(x, y) 1
        assert_eq!(product.terms().len(), 2);
        let vev = product.vacuum_expectation();
        assert_eq!(vev.terms().len(), 1);
        assert_eq!(vev.terms()[0].0, BigRational::one());
    }

    #[test]
    fn product_of_squares_has_coefficients_one_four_two() {
        let a = WickPolynomial::from_monomial(mono(OrderingTag::Omega, &[1, 1]));
        let b = WickPolynomial::from_monomial(mono(OrderingTag::Omega, &[1, 1]));
        let product = wick_product(&a, &b).unwrap();
        let mut by_degree: BTreeMap<usize, BigRational> = BTreeMap::new();
        for term in product.terms() {
            by_degree.insert(term.monomial.degree(), term.coefficient.clone());
        }
        assert_eq!(by_degree[&4], BigRational::one());
        assert_eq!(by_degree[&2], BigRational::from(BigInt::from(4)));
        assert_eq!(by_degree[&0], BigRational::from(BigInt::from(2)));
        // Only the full contraction survives the expectation value.
        let vev = product.vacuum_expectation();
        assert_eq!(vev.terms().len(), 1);
        assert_eq!(vev.terms()[0].0, BigRational::from(BigInt::from(2)));
        assert_eq!(vev.terms()[0].1.len(), 2);
    }

    #[test]
    fn mismatched_orderings_are_rejected() {
        let a = WickPolynomial::from_monomial(mono(OrderingTag::Omega, &[1]));
        let b = WickPolynomial::from_monomial(mono(OrderingTag::Hadamard, &[1]));
        assert!(matches!(
            wick_product(&a, &b),
            Err(WickError::KernelMismatch { .. })
        ));
    }

    #[test]
    fn two_factor_normal_order() {
        let plain = mono(OrderingTag::Unordered, &[1, 2]);
        let rewritten = normal_order(&plain, OrderingTag::Hadamard).unwrap();
        assert_eq!(rewritten.terms().len(), 2);
        let identity_term = rewritten
            .terms()
            .iter()
            .find(|t| t.monomial.degree() == 0)
            .unwrap();
        assert_eq!(identity_term.coefficient, BigRational::one());
        assert_eq!(identity_term.kernels.len(), 1);
    }

    #[test]
    fn normal_order_round_trip_is_identity_through_degree_six() {
        for degree in 1..=6usize {
            let slots: Vec<usize> = (1..=degree).collect();
            let plain = mono(OrderingTag::Unordered, &slots);
            let ordered = normal_order(&plain, OrderingTag::Hadamard).unwrap();
            let back = substitute_inverse(&ordered).unwrap();
            let expected = WickPolynomial::from_monomial(plain);
            assert_eq!(back, expected, "degree {degree}");
        }
    }

    #[test]
    fn coincident_slots_with_pairing_are_rejected() {
        let plain = mono(OrderingTag::Unordered, &[1, 1]);
        assert!(matches!(
            normal_order(&plain, OrderingTag::Hadamard),
            Err(WickError::OnDiagonal { slot: 1 })
        ));
    }

    #[test]
    fn odd_degree_expectation_vanishes_after_rewrite() {
        for degree in [1usize, 3, 5] {
            let slots: Vec<usize> = (1..=degree).collect();
            let plain = mono(OrderingTag::Unordered, &slots);
            let rewritten = normal_order(&plain, OrderingTag::Omega).unwrap();
            assert!(rewritten.vacuum_expectation().is_zero(), "degree {degree}");
        }
    }

    #[test]
    fn fermionic_swap_flips_the_sign() {
        let psi0 = FieldLabel::plain(FieldId::PsiComponent(0));
        let psi1 = FieldLabel::plain(FieldId::PsiComponent(1));
        let forward =
            WickMonomial::new(OrderingTag::Omega, vec![(psi0, 1), (psi1, 1)]).unwrap();
        let reversed =
            WickMonomial::new(OrderingTag::Omega, vec![(psi1, 1), (psi0, 1)]).unwrap();
        let p = WickPolynomial::from_monomial(forward);
        let q = WickPolynomial::from_monomial(reversed);
        assert_eq!(p.terms()[0].monomial, q.terms()[0].monomial);
        assert_eq!(p.terms()[0].coefficient, -q.terms()[0].coefficient.clone());
    }

    #[test]
    fn more_than_two_fermions_are_rejected() {
        let psi0 = FieldLabel::plain(FieldId::PsiComponent(0));
        assert!(matches!(
            WickMonomial::new(OrderingTag::Omega, vec![(psi0, 1), (psi0, 2), (psi0, 3)]),
            Err(WickError::UnsupportedFermion)
        ));
    }

    #[test]
    fn vertex_closed_form_examples() {
        let kernel = TwoPointKernel::constant(OrderingTag::Omega, Complex64::new(2.0_f64.ln(), 0.0));
        let origin = Point::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let v = vertex_two_point(one, one, &kernel, origin, origin).unwrap();
        assert!((v - Complex64::new(2.0, 0.0)).norm() < 1e-15);
        let v0 = vertex_two_point(zero, one, &kernel, origin, origin).unwrap();
        assert!((v0 - one).norm() < 1e-15);
    }

    #[test]
    fn sign_flip_inverts_the_vertex_value() {
        let kernel = TwoPointKernel::constant(OrderingTag::Omega, Complex64::new(0.7, 0.3));
        let origin = Point::new(0.0, 0.0);
        let g1 = Complex64::new(1.3, 0.0);
        let g2 = Complex64::new(-0.4, 0.0);
        let v = vertex_two_point(g1, g2, &kernel, origin, origin).unwrap();
        let w = vertex_two_point(g1, g2, &kernel.flipped(), origin, origin).unwrap();
        assert!((v * w - Complex64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn singular_kernel_is_reported() {
        let kernel = TwoPointKernel::constant(OrderingTag::Omega, Complex64::new(f64::INFINITY, 0.0));
        let origin = Point::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        assert!(matches!(
            vertex_two_point(one, one, &kernel, origin, origin),
            Err(WickError::SingularKernel)
        ));
    }

    #[test]
    fn truncated_vertex_stays_within_the_tail_bound() {
        let kernel = TwoPointKernel::constant(OrderingTag::Omega, Complex64::new(0.9, -0.4));
        let origin = Point::new(0.0, 0.0);
        let g1 = Complex64::new(1.1, 0.2);
        let g2 = Complex64::new(0.8, -0.3);
        let exact = vertex_two_point(g1, g2, &kernel, origin, origin).unwrap();
        let (series, bound) =
            vertex_two_point_truncated(g1, g2, &kernel, origin, origin, 12).unwrap();
        assert!((exact - series).norm() <= bound);
        assert!(bound < 1e-6);
    }

    #[test]
    fn pretty_printer_renders_the_square_product() {
        let a = WickPolynomial::from_monomial(mono(OrderingTag::Omega, &[1, 1]));
        let product = wick_product(&a, &a).unwrap();
        let text = product.to_string();
        assert!(text.contains(":phi^2(x1) phi^2(x2):_om"), "{text}");
        assert!(text.contains("(4) om[x1, x2] :phi(x1) phi(x2):_om"), "{text}");
        assert!(text.contains("(2) om[x1, x2]^2"), "{text}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_identity_on_random_monomials(
            degree in 1usize..6,
            reuse in proptest::collection::vec(0usize..3, 6),
        ) {
            // Random slot patterns with occasional repeats; repeats make
            // the rewrite fail loudly instead of silently evaluating the
            // kernel on the diagonal.
            let mut slots = Vec::new();
            let mut next = 1usize;
            for i in 0..degree {
                if reuse[i] == 0 && next > 1 {
                    slots.push(next - 1);
                } else {
                    slots.push(next);
                    next += 1;
                }
            }
            let plain = WickMonomial::new(
                OrderingTag::Unordered,
                slots.iter().map(|&s| (FieldLabel::plain(FieldId::Phi), s)).collect(),
            ).unwrap();
            let has_repeat = {
                let mut sorted = slots.clone();
                sorted.sort_unstable();
                sorted.windows(2).any(|w| w[0] == w[1])
            };
            match normal_order(&plain, OrderingTag::Omega) {
                Ok(ordered) => {
                    prop_assert!(!has_repeat || degree == 1);
                    let back = substitute_inverse(&ordered).unwrap();
                    prop_assert_eq!(back, WickPolynomial::from_monomial(plain));
                }
                Err(WickError::OnDiagonal { .. }) => prop_assert!(has_repeat),
                Err(other) => return Err(TestCaseError::fail(format!("{other}"))),
            }
        }

        #[test]
        fn vertex_reciprocal_under_sign_flip(
            re in -1.5f64..1.5, im in -1.5f64..1.5,
            g1 in -2.0f64..2.0, g2 in -2.0f64..2.0,
        ) {
            let kernel = TwoPointKernel::constant(OrderingTag::Omega, Complex64::new(re, im));
            let origin = Point::new(0.0, 0.0);
            let a = Complex64::new(g1, 0.0);
            let b = Complex64::new(g2, 0.0);
            let v = vertex_two_point(a, b, &kernel, origin, origin).unwrap();
            let w = vertex_two_point(a, b, &kernel.flipped(), origin, origin).unwrap();
            prop_assert!((v * w - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }
}
