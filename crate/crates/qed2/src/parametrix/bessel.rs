//! Integer-order Bessel and Hankel functions of complex argument.
//!
//! Ascending power series only: the desk-scale arguments here stay below
//! |z| ~ 10, where the alternating series retains comfortably more than ten
//! significant digits in f64. The logarithm in Y_n is the principal branch;
//! arguments produced by the propagator routines stay in the closed right
//! half-plane, away from the cut.

use num_complex::Complex64;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Harmonic number H_n with H_0 = 0.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Digamma at a positive integer: psi(k) = -gamma + H_{k-1}.
pub fn digamma_int(k: usize) -> f64 {
    assert!(k >= 1, "digamma_int needs a positive integer");
    -EULER_GAMMA + harmonic(k - 1)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// J_n(z) for integer n >= 0 by the ascending series.
pub fn bessel_j(n: usize, z: Complex64) -> Complex64 {
    let half = z / 2.0;
    let q = -half * half;
    let mut term = half.powu(n as u32) / factorial(n);
    let mut sum = term;
    for k in 1..400 {
        term *= q / (k as f64 * (n + k) as f64);
        sum += term;
        if term.norm() < 1e-17 * sum.norm().max(1e-300) && k as f64 > z.norm() {
            break;
        }
    }
    sum
}

/// Y_n(z) for integer n >= 0, principal branch of the logarithm.
pub fn bessel_y(n: usize, z: Complex64) -> Complex64 {
    use std::f64::consts::{FRAC_2_PI, PI};
    let half = z / 2.0;
    let log_term = (half.ln() + EULER_GAMMA) * bessel_j(n, z) * FRAC_2_PI;

    // Finite sum of negative powers (absent for n = 0).
    let mut neg = Complex64::new(0.0, 0.0);
    if n >= 1 {
        let mut pw = half.powi(-(n as i32));
        for k in 0..n {
            neg += factorial(n - 1 - k) / factorial(k) * pw;
            pw *= half * half;
        }
        neg /= PI;
    }

    // Series with harmonic-number weights.
    let q = -half * half;
    let mut pref = half.powu(n as u32) / factorial(n);
    let mut series = pref * (harmonic(0) + harmonic(n));
    for k in 1..400 {
        pref *= q / (k as f64 * (n + k) as f64);
        let term = pref * (harmonic(k) + harmonic(n + k));
        series += term;
        if term.norm() < 1e-17 * series.norm().max(1e-300) && k as f64 > z.norm() {
            break;
        }
    }
    log_term - neg - series / PI
}

/// Hankel function of the second kind, H^(2)_n = J_n - i Y_n.
pub fn hankel2(n: usize, z: Complex64) -> Complex64 {
    bessel_j(n, z) - Complex64::i() * bessel_y(n, z)
}

/// H^(2)_{-n} through the reflection (-1)^n H^(2)_n.
pub fn hankel2_neg(n: usize, z: Complex64) -> Complex64 {
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    sign * hankel2(n, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn re(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn known_real_values() {
        // Reference values to 13+ digits (standard tables).
        assert!((bessel_j(0, re(1.0)).re - 0.765_197_686_557_966_6).abs() < 1e-14);
        assert!((bessel_j(1, re(1.0)).re - 0.440_050_585_744_933_5).abs() < 1e-14);
        assert!((bessel_y(0, re(1.0)).re - 0.088_256_964_215_677_0).abs() < 1e-13);
        assert!((bessel_y(1, re(1.0)).re - (-0.781_212_821_300_288_7)).abs() < 1e-13);
        // First zero of J_0.
        assert!(bessel_j(0, re(2.404_825_557_695_773)).re.abs() < 1e-13);
        assert!(bessel_j(0, re(1.0)).im.abs() < 1e-16);
    }

    #[test]
    fn wronskian_on_complex_samples() {
        // J_{n+1} Y_n - J_n Y_{n+1} = 2 / (pi z), valid off the cut.
        let samples = [
            Complex64::new(0.8, 0.0),
            Complex64::new(2.3, -0.4),
            Complex64::new(0.3, -1.1),
            Complex64::new(1.7, 0.9),
            Complex64::new(0.05, -0.02),
        ];
        for &z in &samples {
            for n in 0..4usize {
                let w = bessel_j(n + 1, z) * bessel_y(n, z) - bessel_j(n, z) * bessel_y(n + 1, z);
                let target = 2.0 / (PI * z);
                assert!(
                    (w - target).norm() < 1e-12 * target.norm(),
                    "wronskian failed at n={n}, z={z}"
                );
            }
        }
    }

    #[test]
    fn bessel_ode_residual() {
        // z^2 f'' + z f' + (z^2 - n^2) f = 0 with derivatives from the
        // recurrences f' = (f_{n-1} - f_{n+1}) / 2 (n >= 1) and J_0' = -J_1.
        let z = Complex64::new(1.3, -0.6);
        for f in [bessel_j as fn(usize, Complex64) -> Complex64, bessel_y] {
            let f0 = f(0, z);
            let f1 = f(1, z);
            let f2 = f(2, z);
            let d1 = -f1;
            // f0'' = (-f1)' = -(f0 - f2) / 2.
            let dd = -(f0 - f2) / 2.0;
            let residual = z * z * dd + z * d1 + z * z * f0;
            assert!(residual.norm() < 1e-12 * f0.norm().max(1.0), "residual {residual}");
        }
    }

    #[test]
    fn hankel_reflection() {
        let z = Complex64::new(0.9, -0.2);
        assert_eq!(hankel2_neg(2, z), hankel2(2, z));
        assert_eq!(hankel2_neg(3, z), -hankel2(3, z));
    }

    #[test]
    fn digamma_values() {
        assert!((digamma_int(1) + EULER_GAMMA).abs() < 1e-16);
        assert!((digamma_int(4) - (-EULER_GAMMA + 11.0 / 6.0)).abs() < 1e-15);
    }
}
