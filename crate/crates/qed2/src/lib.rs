//! Symbolic-numeric toolkit for the Schwinger model (two-dimensional QED)
//! on conformally flat, globally hyperbolic spacetimes.
//!
//! The metric is always taken in conformal gauge,
//! `ds^2 = e^{2 sigma(x)} (dx0^2 - dx1^2)` with signature `(+,-)`.
//! A spacetime is specified by the conformal factor `sigma` as a closed-form
//! expression in the coordinates `x0`, `x1` (see [`expr`]).
//!
//! Layered design, bottom up:
//! * [`expr`]: exact symbolic expressions for `sigma` and its derivatives.
//! * [`geometry`]: geodesics, the world function, Van Vleck determinants,
//!   normal neighbourhoods.
//! * [`parametrix`]: Hadamard/DeWitt-Schwinger two-point kernels for the
//!   free scalar field, both as a curvature expansion and, in the flat case,
//!   in closed Bessel form.
//! * [`quantization`]: finite-mode CCR/CAR representations built from a
//!   symplectic (or inner-product) structure plus a compatible complex
//!   structure.
//! * [`krein`]: the indefinite-metric one-particle space used by the
//!   massless pseudoscalar sector.
//! * [`wick`]: exact rational Wick/normal-ordering combinatorics.
//! * [`ope`]: operator product expansions of the dressed gauge field.
//! * [`schwinger`]: model-specific observables (boson mass, field strength,
//!   stress tensor, vertex correlators, theta vacua, charge screening).
//! * [`verify`]: the battery of cross-checks exposed by the CLI.

pub mod expr;
pub mod geometry;
pub mod krein;
pub mod ope;
pub mod parametrix;
pub mod quantization;
pub mod schwinger;
pub mod tolerances;
pub mod verify;
pub mod wick;
pub use ope::OpeContext;
pub use schwinger::{assemble, SchwingerParameters, SigmaMode, SolutionFields, ThetaState};
pub use wick::{WickMonomial, WickPolynomial};

pub use expr::Expr;
pub use geometry::{Geometry, Point};

