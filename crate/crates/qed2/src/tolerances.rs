//! Central registry of verification tolerances.
//!
//! Every threshold used by the acceptance battery (see [`crate::verify`]) and
//! by the module-level oracle tests lives here, with a note on where the
//! number comes from. Solver-internal knobs (Newton stopping criteria, grid
//! sizes) stay with their solvers; this file is only about *claims we test*.

/// Algebraic identities evaluated in f64 without iteration (frame closure,
/// index contractions). Rounding in a handful of multiplies stays near
/// machine epsilon; 1e-12 leaves three digits of headroom.
pub const EXACT_ALGEBRA: f64 = 1e-12;

/// Identities routed through a linear solve or short recurrence (curvature
/// contraction, metric-operator identities, projection checks). O(n^3)
/// rounding on small matrices stays below 1e-10.
pub const STRUCTURE_IDENTITY: f64 = 1e-10;

/// Symmetry of biscalars under argument exchange. The two evaluation orders
/// share the geodesic solve up to endpoint relabeling, so only rounding and
/// solver-tolerance noise separates them.
pub const BISCALAR_SYMMETRY: f64 = 1e-10;

/// Hamilton-Jacobi residual |2 sb - g^{mn} (d_m sb)(d_n sb)| of the world
/// function. Limited by the discretized-geodesic truncation error after
/// Richardson refinement, not by f64.
pub const WORLD_FUNCTION_HJ: f64 = 1e-8;

/// Relative agreement between the boundary-value world function and an
/// independent shooting integration at 10x resolution.
pub const WORLD_FUNCTION_SHOOTING_REL: f64 = 1e-6;

/// Van Vleck determinant at coincidence (exact value 1) for curved factors.
pub const VAN_VLECK_COINCIDENCE: f64 = 1e-6;

/// Van Vleck finite-difference route against the transport-equation route.
pub const VAN_VLECK_TRANSPORT_REL: f64 = 1e-5;

/// Curvature-corrected merged squared distance vs twice the world function:
/// the fitted convergence order in the separation scale must reach 3.
pub const MERGED_DISTANCE_ORDER_MIN: f64 = 3.0;

/// Massless flat two-point function against the closed Minkowski logarithm
/// on the calibration grid, relative, after the one-time constant fit.
pub const PROPAGATOR_ANCHOR_REL: f64 = 1e-8;

/// Massive flat propagator partial sum against an independently evaluated
/// quarter Hankel function at spacelike radii, absolute.
pub const HANKEL_ANCHOR_ABS: f64 = 1e-8;

/// Transport-recursion residual of the heat-kernel coefficients along
/// sampled geodesics, through order 4.
pub const DS_RECURSION_RESIDUAL: f64 = 1e-6;

/// Flat-space mass-shifted coefficients against the closed form
/// (-m^2)^n / n!, absolute, n <= 4.
pub const FLAT_ABAR_ABS: f64 = 1e-12;

/// Hermiticity and exchange symmetry of two-point evaluations.
pub const TWO_POINT_HERMITICITY: f64 = 1e-10;

/// Krein metric operator: eta^2 = 1, self-adjointness, block orthogonality.
pub const KREIN_IDENTITY: f64 = 1e-10;

/// Slack allowed in the Krein domination inequality (f,f) >= |<f,f>|;
/// pure rounding, both sides assembled from the same Gram data.
pub const KREIN_DOMINATION_SLACK: f64 = 1e-12;

/// One-particle structure identities: J^2 = -I, skew-adjointness of J in
/// the 2mu inner product, projection inner-product identities.
pub const ONE_PARTICLE_IDENTITY: f64 = 1e-10;

/// Vacuum expectation values of expanded gauge-field products against the
/// quasi-free pairing formula with the same kernel.
pub const OPE_VEV_MATCH: f64 = 1e-9;

/// Exchange symmetry of expansion coefficient kernels.
pub const OPE_COEFF_SYMMETRY: f64 = 1e-10;

/// Scalar expansion coefficients after relabeling the reference point
/// inside the patch (normal coordinates recomputed).
pub const OPE_RELABEL: f64 = 1e-8;

/// Fitted order in the separation ratio of the three-point associativity
/// deviation (log-corrected power law).
pub const OPE_ASSOCIATIVITY_ORDER_MIN: f64 = 2.0;

/// Proca-equation residual on flat plane-wave modes at the generated mass.
pub const PROCA_ON_SHELL: f64 = 1e-8;

/// Minimum Proca residual required off the true mass (1.5x scan point);
/// the scan must *fail* to satisfy the equations away from e^2/pi.
pub const PROCA_OFF_SHELL_MIN: f64 = 1e-2;

/// Field-strength-squared identity spot checks, absolute.
pub const F_SQUARED_SPOT: f64 = 1e-12;

/// Numeric residual of the vertex-correlator exponent cancellation.
pub const ZETA_CANCELLATION_ABS: f64 = 1e-10;

/// Merge-limit value of the two-vertex correlator (exact limit 1).
pub const ZETA_MERGE_LIMIT: f64 = 1e-6;

/// One-mode stress-tensor expectation from point splitting against the
/// normal-ordered mode-sum value, relative, after regulator extrapolation.
pub const STRESS_TENSOR_REL: f64 = 1e-2;

/// Required fitted exponent of the smeared-charge norm decay over the
/// scale ladder {1,2,4,8,16}, with its half-width.
pub const CHARGE_DECAY_EXPONENT: f64 = -2.0;
pub const CHARGE_DECAY_EXPONENT_TOL: f64 = 0.1;

/// Grid used by the flat-anchor calibration and its verification.
pub const ANCHOR_GRID: usize = 10;

/// Fallback absolute floor when a relative comparison divides by a value
/// closer to zero than rounding can support.
pub const NEAR_ZERO_FLOOR: f64 = 1e-14;

/// Relative error helper: |a-b| / max(|b|, floor).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(NEAR_ZERO_FLOOR)
}

/// Complex relative error with the same floor convention.
pub fn rel_err_c(a: num_complex::Complex64, b: num_complex::Complex64) -> f64 {
    (a - b).norm() / b.norm().max(NEAR_ZERO_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_positive_and_ordered() {
        assert!(EXACT_ALGEBRA < STRUCTURE_IDENTITY);
        assert!(STRUCTURE_IDENTITY < WORLD_FUNCTION_HJ);
        assert!(WORLD_FUNCTION_HJ < WORLD_FUNCTION_SHOOTING_REL);
        assert!(VAN_VLECK_COINCIDENCE < VAN_VLECK_TRANSPORT_REL);
        assert!(PROPAGATOR_ANCHOR_REL <= HANKEL_ANCHOR_ABS);
        assert!(CHARGE_DECAY_EXPONENT_TOL > 0.0);
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(1e-16, 0.0) < 1.0);
        assert_eq!(rel_err(2.0, 1.0), 1.0);
    }
}
