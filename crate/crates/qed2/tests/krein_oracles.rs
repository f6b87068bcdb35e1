//! Independent oracles for the Krein-space model: the logarithmic kernel
//! against the calibrated massless propagator, the metric operator
//! against a direct Gram solve, and bulk domination sampling.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use qed2::geometry::{Geometry, Point};
use qed2::krein::{FormSign, KreinModel, TestBasis};
use qed2::parametrix::{two_point_plus, ModelParameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn log_kernel_matches_calibrated_massless_two_point() {
    // The model kernel -(1/4pi) ln(r^2 + eps^2) must agree with the real
    // part of the calibrated massless two-point function at spacelike
    // separation on a flat chart; the calibration offset exists precisely
    // to cancel the ln 2 between -sigma_bar = r^2/2 and r^2.
    let geom = Arc::new(Geometry::minkowski(6.0));
    let params = ModelParameters::new(0.0, 0.0).with_eps(1e-10);
    let eps_kernel = 1e-6f64;
    for r in [0.5, 1.0, 2.0, 3.5] {
        let kernel = -((r * r + eps_kernel * eps_kernel).ln()) / (4.0 * std::f64::consts::PI);
        let g = two_point_plus(
            &geom,
            &params,
            Point::new(1e-9, r),
            Point::new(0.0, 0.0),
        )
        .unwrap();
        assert!(
            (g.re - kernel).abs() < 1e-7,
            "r = {r}: kernel {kernel} vs two-point real part {}",
            g.re
        );
        assert!(g.im.abs() < 1e-6, "spacelike imaginary part {}", g.im);
    }
}

#[test]
fn gram_assembly_matches_direct_double_sum() {
    let basis = TestBasis::gaussians(6, 0.4, 5.0, 201);
    let grid = basis.grid();
    let weights = basis.weights();
    let eps = basis.epsilon();
    for (i, j) in [(0usize, 1usize), (2, 2), (1, 5)] {
        let fi = basis.function_values(i);
        let fj = basis.function_values(j);
        let mut acc = 0.0;
        for a in 0..grid.len() {
            for b in 0..grid.len() {
                let r = grid[a] - grid[b];
                let k = -((r * r + eps * eps).ln()) / (4.0 * std::f64::consts::PI);
                acc += weights[a] * fi[a] * k * weights[b] * fj[b];
            }
        }
        assert!(
            (acc - basis.gram()[(i, j)]).abs() < 1e-12,
            "Gram entry ({i}, {j}) mismatch"
        );
    }
}

#[test]
fn metric_operator_matches_gram_solve() {
    // eta is determined linearly by the two Grams: G_ind = G_pos * eta.
    // Solving that system is an independent route to the same operator.
    let model = KreinModel::build(TestBasis::gaussians(8, 0.35, 7.0, 281)).unwrap();
    let eta = model.metric_operator().unwrap();
    let g_pos = model.positive_gram(FormSign::Plus);
    let g_ind = model.indefinite_gram();
    let solved = g_pos.lu().solve(&g_ind).expect("positive Gram invertible");
    let defect = (&eta - &solved).amax();
    assert!(defect < 1e-7, "structural eta vs Gram solve: {defect:.3e}");
    // And the product reproduces the indefinite Gram directly.
    let back = model.positive_gram(FormSign::Plus) * &eta;
    assert!((&back - &g_ind).amax() < 1e-10);
}

#[test]
fn domination_holds_for_one_thousand_random_vectors_both_signs() {
    let model = KreinModel::build(TestBasis::gaussians(8, 0.35, 7.0, 281)).unwrap();
    let n = model.basis().n_functions();
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut checked = 0;
    for _ in 0..1000 {
        let mut f: DVector<Complex64> = DVector::zeros(n + 1);
        for k in 0..n + 1 {
            f[k] = Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        }
        for sign in [FormSign::Plus, FormSign::Minus] {
            let pos = model.positive_form(&f, &f, sign);
            let ind = model.indefinite_form_signed(&f, &f, sign);
            assert!(pos.im.abs() < 1e-10);
            assert!(
                pos.re >= ind.norm() - 1e-12,
                "domination fails at sample {checked}: {} < {}",
                pos.re,
                ind.norm()
            );
        }
        checked += 1;
    }
    assert_eq!(checked, 1000);
}

#[test]
fn eta_eigenvalues_split_into_plus_minus_one() {
    // An involution diagonalizes with eigenvalues +-1; the hyperbolic pair
    // (v0, h) contributes exactly one -1.
    let model = KreinModel::build(TestBasis::gaussians(8, 0.35, 7.0, 281)).unwrap();
    let eta = model.metric_operator().unwrap();
    let dim = eta.nrows();
    // eta is not symmetric in coordinates, so use the spectrum of eta
    // through its action: count the -1 eigenvalues via det sign changes of
    // (eta - t I) is overkill; instead check (eta - I)(eta + I) = 0 and
    // the trace, which equals dim - 2 for one flipped direction.
    let zero = (&eta - DMatrix::identity(dim, dim)) * (&eta + DMatrix::identity(dim, dim));
    assert!(zero.amax() < 1e-9);
    assert!((eta.trace() - (dim as f64 - 2.0)).abs() < 1e-9);
}
