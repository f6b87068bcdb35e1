//! Independent oracles for the propagator construction.
//!
//! Everything here is computed by quadrature, finite differences, or
//! closed-form identities sharing as little code as possible with the
//! library path under test: Bessel values come from integral
//! representations (not the library's power series), differential
//! operators come from explicit stencils applied to the public biscalar
//! evaluators, and the transport recursion is re-substituted rather than
//! re-integrated.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use qed2::geometry::{Domain, Geometry, Point};
use qed2::parametrix::{
    calibrated_feynman, ds_coefficients, feynman_hankel_from, feynman_hankel_m2_derivative_from,
    feynman_truncation_estimate_from, hadamard_split, massless_hadamard, two_point_plus,
    DsCoefficients, ModelParameters,
};
use qed2::tolerances;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

// ---------------------------------------------------------------------------
// Quadrature oracles for J0 and Y0
// ---------------------------------------------------------------------------

/// J0 by its angular integral representation, composite Simpson.
fn j0_integral(x: f64) -> f64 {
    let n = 4096;
    let h = PI / n as f64;
    let f = |theta: f64| (x * theta.sin()).cos();
    let mut acc = f(0.0) + f(PI);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    acc * h / (3.0 * PI)
}

/// Y0 by its integral representation
/// `(4/pi^2) int_0^{pi/2} cos(x cos t) (gamma + ln(2 x sin^2 t)) dt`,
/// evaluated with tanh-sinh quadrature to absorb the endpoint logarithm.
fn y0_integral(x: f64) -> f64 {
    let g = |t: f64| (x * t.cos()).cos() * (EULER_GAMMA + (2.0 * x * t.sin() * t.sin()).ln());
    // Map (0, pi/2) to the tanh-sinh variable. Node weights follow from
    // u(s) = (pi/4) (1 + tanh((pi/2) sinh s)).
    let h = 1.0 / 64.0;
    let mut acc = 0.0;
    for k in -500..=500 {
        let s = k as f64 * h;
        let w = (PI / 2.0) * s.sinh();
        if w.abs() > 30.0 {
            // Weight below 1e-25; also keeps u strictly inside (0, pi/2)
            // so the endpoint logarithm stays finite.
            continue;
        }
        // u = (pi/4)(1 + tanh w) without cancellation at the left endpoint.
        let u = (PI / 2.0) / (1.0 + (-2.0 * w).exp());
        let du = (PI / 4.0) * (PI / 2.0) * s.cosh() / (w.cosh() * w.cosh());
        acc += g(u) * du * h;
    }
    acc * 4.0 / (PI * PI)
}

#[test]
fn series_bessel_matches_integral_representations() {
    use qed2::parametrix::bessel::{bessel_j, bessel_y};
    for k in 0..20 {
        let x = 0.3 + 0.15 * k as f64;
        let zj = bessel_j(0, Complex64::new(x, 0.0));
        let zy = bessel_y(0, Complex64::new(x, 0.0));
        assert!(zj.im.abs() < 1e-16 && zy.im.abs() < 1e-16);
        assert!(
            (zj.re - j0_integral(x)).abs() < 1e-11,
            "J0({x}): series {} vs integral {}",
            zj.re,
            j0_integral(x)
        );
        assert!(
            (zy.re - y0_integral(x)).abs() < 1e-10,
            "Y0({x}): series {} vs integral {}",
            zy.re,
            y0_integral(x)
        );
    }
}

#[test]
fn flat_hankel_matches_independent_bessel_oracle() {
    // Twenty spacelike radii; the library value must equal
    // (1/4)(J0 - i Y0)(m r) with the Bessel values taken from the
    // quadrature oracles above.
    let geom = Arc::new(Geometry::minkowski(6.0));
    let params = ModelParameters::new(1.0, 0.0).with_eps(1e-13);
    let ds = ds_coefficients(&geom, &params, 4).unwrap();
    let x = Point::new(0.0, 0.0);
    for k in 0..20 {
        let r = 0.3 + 0.15 * k as f64;
        let xp = Point::new(0.0, r);
        let got = feynman_hankel_from(&geom, &params, &ds, x, xp, 4).unwrap();
        let want = Complex64::new(j0_integral(r), -y0_integral(r)) / 4.0;
        assert!(
            (got - want).norm() < tolerances::HANKEL_ANCHOR_ABS,
            "r = {r}: got {got}, oracle {want}, diff {:.3e}",
            (got - want).norm()
        );
    }
}

// ---------------------------------------------------------------------------
// Curved-chart pipeline
// ---------------------------------------------------------------------------

fn curved() -> Arc<Geometry> {
    Arc::new(Geometry::from_expr_str("0.1 * x1 * x1", Domain::symmetric(4.0)).unwrap())
}

#[test]
fn coincidence_coefficient_matches_curvature() {
    // A_1(x, x) = R(x)/6 + xi R(x); the first term comes from the wave
    // operator acting on the Van Vleck root at coincidence, so this pins
    // both the recursion source and its sign.
    let geom = curved();
    for xi in [0.0, 0.3] {
        let params = ModelParameters::new(1.0, xi);
        let ds = ds_coefficients(&geom, &params, 2).unwrap();
        for x in [Point::new(0.0, 0.4), Point::new(0.3, -0.7)] {
            let r = geom.curvature_at(x).unwrap().scalar;
            let want = r / 6.0 + xi * r;
            let got = ds.a(1).value(x, x).unwrap().re;
            assert!(
                (got - want).abs() < 2e-4 * want.abs().max(0.05),
                "xi = {xi}, x = {x}: A1(x,x) = {got} vs {want}"
            );
        }
    }
}

#[test]
fn van_vleck_biscalar_identity() {
    let geom = curved();
    let params = ModelParameters::new(1.0, 0.0);
    let ds = ds_coefficients(&geom, &params, 1).unwrap();
    let x = Point::new(0.2, 0.3);
    for xp in [Point::new(-0.1, 0.8), Point::new(0.6, -0.2), Point::new(0.2, 0.3)] {
        let a0 = ds.a(0).value(x, xp).unwrap().re;
        let vvh = ds.van_vleck_half().value(x, xp).unwrap().re;
        // Identity with the exposed transport-route determinant.
        assert!((a0 - vvh).abs() < 1e-12, "A0 = {a0} vs Delta^(1/2) = {vvh}");
        // Cross-route agreement with the finite-difference determinant.
        let vv_fd = geom.van_vleck(x, xp).unwrap();
        assert!(
            (a0 * a0 - vv_fd).abs() < tolerances::VAN_VLECK_TRANSPORT_REL * vv_fd.abs().max(1.0),
            "A0^2 = {} vs FD Van Vleck = {vv_fd}",
            a0 * a0
        );
    }
    // Flat chart: both exactly one.
    let flat = Arc::new(Geometry::minkowski(3.0));
    let dsf = ds_coefficients(&flat, &params, 1).unwrap();
    assert_eq!(dsf.a(0).value(x, Point::new(0.9, -0.4)).unwrap().re, 1.0);
}

/// FD second derivative in the second argument of a pair function.
fn box_second_arg(
    geom: &Arc<Geometry>,
    f: &dyn Fn(Point) -> f64,
    q: Point,
    h: f64,
) -> f64 {
    let d2 = |shift: fn(Point, f64) -> Point| {
        (-f(shift(q, 2.0 * h)) + 16.0 * f(shift(q, h)) - 30.0 * f(q) + 16.0 * f(shift(q, -h))
            - f(shift(q, -2.0 * h)))
            / (12.0 * h * h)
    };
    let d00 = d2(|p, s| Point::new(p.x0 + s, p.x1));
    let d11 = d2(|p, s| Point::new(p.x0, p.x1 + s));
    (-2.0 * geom.sigma(q)).exp() * (d00 - d11)
}

#[test]
fn transport_recursion_residual_along_geodesics() {
    // Substitute the computed coefficients back into the transport
    // recursion lam a'_{n+1} + (n+1) a_{n+1} = S_n along ten geodesics,
    // with every derivative taken by finite differences of the public
    // evaluators. Orders through N = 4.
    let geom =
        Arc::new(Geometry::from_expr_str("0.02 * x1 * x1", Domain::symmetric(4.0)).unwrap());
    let xi = 0.0;
    let params = ModelParameters::new(1.0, xi);
    let order = 4;
    let ds = ds_coefficients(&geom, &params, order).unwrap();
    let x = Point::new(0.1, -0.2);
    let vvh = ds.van_vleck_half();

    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let ang = 0.23 + k as f64 * 0.6;
        let xp = Point::new(x.x0 + 0.8 * ang.cos(), x.x1 + 0.8 * ang.sin());
        let path = geom.geodesic(x, xp).unwrap();
        let np = path.points.len();
        let dl = 1.0 / (np - 1) as f64;
        for n in 0..order {
            let a_next = ds.a_hat(n + 1);
            // Sample a few interior affine times.
            for &jfrac in &[0.3, 0.55, 0.8] {
                let j = ((np - 1) as f64 * jfrac) as usize;
                let lam = j as f64 * dl;
                let q = path.points[j];
                // lam d/dlam by a centered 5-point stencil on the path.
                let v = |idx: usize| a_next.value(x, path.points[idx]).unwrap().re;
                let da = (v(j - 2) - 8.0 * v(j - 1) + 8.0 * v(j + 1) - v(j + 2)) / (12.0 * dl);
                let lhs = lam * da + (n + 1) as f64 * a_next.value(x, q).unwrap().re;
                // Source S_n = Delta^{-1/2} (box + xi R)(A_n) at q.
                let an = ds.a(n).clone();
                let f = move |p: Point| an.value(x, p).unwrap().re;
                let lap = box_second_arg(&geom, &f, q, 0.02);
                let r = geom.curvature_at(q).unwrap().scalar;
                let src =
                    (lap + xi * r * ds.a(n).value(x, q).unwrap().re) / vvh.value(x, q).unwrap().re;
                let res = (lhs - src).abs();
                worst = worst.max(res);
            }
        }
    }
    assert!(
        worst < tolerances::DS_RECURSION_RESIDUAL,
        "worst recursion residual {worst:.3e}"
    );
}

fn assemble_hankel(
    geom: &Arc<Geometry>,
    params: &ModelParameters,
    ds: &DsCoefficients,
    x: Point,
    xp: Point,
    order: usize,
) -> Complex64 {
    feynman_hankel_from(geom, params, ds, x, xp, order).unwrap()
}

#[test]
fn wave_operator_annihilates_truncated_series() {
    // In the convention fixed by the Hankel argument z^2 = -2 m^2 sb, the
    // kernel is the oscillatory H0 branch at spacelike separation and the
    // decaying K0 branch at timelike separation, and on both branches the
    // annihilating operator is (box - m^2) with box = e^{-2 sigma}
    // (d00 - d11). Check flat first, then apply the same stencil to the
    // order-4 curved sum; the residual must stay at the
    // truncation/interpolation floor, far below the O(R G) ~ 1e-2 scale a
    // sign error in the recursion source would produce.
    let params = ModelParameters::new(1.0, 0.0).with_eps(1e-10);
    let order = 4;
    let m2 = params.m * params.m;

    let flat = Arc::new(Geometry::minkowski(6.0));
    let dsf = ds_coefficients(&flat, &params, order).unwrap();
    let x = Point::new(0.1, -0.2);
    for xp in [Point::new(0.2, 0.9), Point::new(1.2, 0.1)] {
        let re_part = |q: Point| assemble_hankel(&flat, &params, &dsf, x, q, order).re;
        let im_part = |q: Point| assemble_hankel(&flat, &params, &dsf, x, q, order).im;
        let g_val = assemble_hankel(&flat, &params, &dsf, x, xp, order);
        let box_val = Complex64::new(
            box_second_arg(&flat, &re_part, xp, 0.02),
            box_second_arg(&flat, &im_part, xp, 0.02),
        );
        let minus = (box_val - m2 * g_val).norm();
        let plus = (box_val + m2 * g_val).norm();
        assert!(
            minus < 1e-5 && plus > 0.05,
            "flat branch check at {xp}: |box - m^2 G| = {minus:.3e}, |box + m^2 G| = {plus:.3e}"
        );
    }

    let geom = curved();
    let ds = ds_coefficients(&geom, &params, order).unwrap();
    for xp in [Point::new(0.4, 0.55), Point::new(-0.3, 0.35)] {
        let re_part = |q: Point| assemble_hankel(&geom, &params, &ds, x, q, order).re;
        let im_part = |q: Point| assemble_hankel(&geom, &params, &ds, x, q, order).im;
        let g_val = assemble_hankel(&geom, &params, &ds, x, xp, order);
        let box_val = Complex64::new(
            box_second_arg(&geom, &re_part, xp, 0.02),
            box_second_arg(&geom, &im_part, xp, 0.02),
        );
        let residual = (box_val - m2 * g_val).norm();
        assert!(residual < 1e-3, "residual {residual:.3e} at xp = {xp}");
    }
}

#[test]
fn massless_split_satisfies_wave_equation() {
    // The massless state-dependent chain is only correct if
    // box [V ln(-sb) + W] = 0 holds in the second argument; dropping W
    // leaves an O(1) defect, so this validates the W recursion as a whole.
    let geom = curved();
    let params = ModelParameters::new(0.0, 0.0).with_eps(1e-10);
    let series = massless_hadamard(&geom, &params, 3).unwrap();
    let x = Point::new(0.1, -0.2);

    let value = |q: Point, with_w: bool| -> Complex64 {
        let sb = geom.world_function(x, q).unwrap().value;
        let v = series.v_sum(x, q, sb).unwrap();
        let w = series.w_sum(x, q, sb).unwrap();
        let log = Complex64::new(-sb, 1e-10).ln();
        if with_w { v * log + w } else { v * log }
    };

    for xp in [Point::new(0.35, 0.6), Point::new(-0.25, 0.45)] {
        let full_re = |q: Point| value(q, true).re;
        let no_w_re = |q: Point| value(q, false).re;
        let res_full = box_second_arg(&geom, &full_re, xp, 0.02).abs();
        let res_no_w = box_second_arg(&geom, &no_w_re, xp, 0.02).abs();
        assert!(
            res_full < 0.05 * res_no_w,
            "W chain not effective: residual {res_full:.3e} vs W-less {res_no_w:.3e}"
        );
        assert!(res_full < 2e-3, "absolute residual {res_full:.3e}");
    }
}

#[test]
fn hankel_routes_agree_on_curved_samples() {
    // The direct Hankel series and the m^2-derivative route share only the
    // transport coefficients; their values must agree to within the
    // truncation estimate of the common order.
    let geom = curved();
    let params = ModelParameters::new(1.0, 0.0).with_eps(1e-10);
    let order = 2;
    let ds = ds_coefficients(&geom, &params, order + 1).unwrap();
    let x = Point::new(0.1, -0.2);
    for xp in [Point::new(0.0, 0.5), Point::new(0.45, -0.75), Point::new(0.55, 0.3)] {
        let g4 = feynman_hankel_from(&geom, &params, &ds, x, xp, order).unwrap();
        let g5 = feynman_hankel_m2_derivative_from(&geom, &params, &ds, x, xp, order).unwrap();
        let bound = feynman_truncation_estimate_from(&geom, &params, &ds, x, xp, order).unwrap();
        assert!(
            (g4 - g5).norm() <= bound.max(1e-9),
            "xp = {xp}: routes differ by {:.3e}, bound {bound:.3e}",
            (g4 - g5).norm()
        );
    }
}

#[test]
fn split_symmetry_flat_exact_and_curved_at_pipeline_accuracy() {
    // Exact-arithmetic symmetry on flat charts; on curved charts the two
    // orderings run through different patches, so agreement at the
    // patch-pipeline accuracy is the meaningful statement.
    let flat = Arc::new(Geometry::minkowski(4.0));
    let params = ModelParameters::new(0.9, 0.0);
    let series = hadamard_split(&flat, &params, 2).unwrap();
    let x = Point::new(0.3, 0.2);
    let xp = Point::new(-0.4, 0.7);
    for n in 0..=2 {
        let d = (series.v(n).value(x, xp).unwrap() - series.v(n).value(xp, x).unwrap()).norm();
        assert!(d <= tolerances::BISCALAR_SYMMETRY, "flat V_{n} symmetry defect {d:.3e}");
        let d = (series.w(n).value(x, xp).unwrap() - series.w(n).value(xp, x).unwrap()).norm();
        assert!(d <= tolerances::BISCALAR_SYMMETRY, "flat W_{n} symmetry defect {d:.3e}");
    }

    let geom = curved();
    let ds = ds_coefficients(&geom, &params, 2).unwrap();
    let x = Point::new(0.15, 0.4);
    let xp = Point::new(-0.2, -0.1);
    for n in 0..=2usize {
        let ab = ds.a(n).value(x, xp).unwrap().re;
        let ba = ds.a(n).value(xp, x).unwrap().re;
        assert!(
            (ab - ba).abs() < 5e-7,
            "curved A_{n} symmetry: {ab} vs {ba} (diff {:.3e})",
            (ab - ba).abs()
        );
    }
}

#[test]
fn two_point_flat_massless_anchor_grid() {
    // 10 x 10 grid of ordered pairs against the closed flat form; mixture
    // of causal characters, all off the light cone.
    let geom = Arc::new(Geometry::minkowski(6.0));
    let params = ModelParameters::new(0.0, 0.0).with_eps(1e-10);
    let mut checked = 0;
    for i in 0..10 {
        for j in 0..10 {
            let x = Point::new(0.35 + 0.11 * i as f64, -0.4 + 0.13 * j as f64);
            let xp = Point::new(-0.22 - 0.07 * j as f64, 0.31 + 0.09 * i as f64);
            let dx0 = x.x0 - xp.x0;
            let dx1 = x.x1 - xp.x1;
            let sq = dx0 * dx0 - dx1 * dx1;
            if sq.abs() < 0.05 {
                continue;
            }
            let want = -Complex64::new(-sq, params.eps * dx0).ln() / (4.0 * PI);
            if want.norm() < 0.02 {
                // ln(-(dx)^2) crosses zero here; relative error is not
                // meaningful at such pairs.
                continue;
            }
            let got = two_point_plus(&geom, &params, x, xp).unwrap();
            let rel = (got - want).norm() / want.norm();
            assert!(rel < tolerances::PROPAGATOR_ANCHOR_REL, "({i},{j}): rel {rel:.3e}");
            checked += 1;
        }
    }
    assert!(checked > 70, "grid too sparse: {checked}");
}

#[test]
fn calibrated_split_tracks_hankel_to_truncation() {
    // The stored-constant calibration of the logarithmic split agrees with
    // the independent Hankel assembly, here on flat charts where the
    // remaining difference is pure series truncation.
    let geom = Arc::new(Geometry::minkowski(6.0));
    let params = ModelParameters::new(0.7, 0.0).with_eps(1e-11);
    let x = Point::new(0.0, 0.0);
    let ds = ds_coefficients(&geom, &params, 5).unwrap();
    for r in [0.5, 1.0, 1.6] {
        let xp = Point::new(0.0, r);
        let split = calibrated_feynman(&geom, &params, x, xp, 5).unwrap();
        let hankel = feynman_hankel_from(&geom, &params, &ds, x, xp, 5).unwrap();
        let trunc = ((params.m * params.m * r * r / 2.0).powi(6) / 518_400.0).max(1e-12);
        assert!(
            (split - hankel).norm() < 50.0 * trunc + 1e-10,
            "r = {r}: diff {:.3e} vs truncation scale {trunc:.3e}",
            (split - hankel).norm()
        );
    }
}
