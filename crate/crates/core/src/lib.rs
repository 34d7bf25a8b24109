//! Numerical laboratory for stochastic differential equations driven by
//! G-Brownian motion: volatility-ambiguous simulation, machine-checked
//! Lyapunov certificates for quasi-sure exponential (in)stability, and
//! worst-case Lyapunov exponent estimation over volatility scenarios.

pub mod csvfmt;
pub mod estimator;
pub mod expr;
pub mod gcalc;
pub mod integrator;
pub mod lyapunov;
pub mod rng;
pub mod scenario;

pub use expr::{Expr, Var};
pub use estimator::{
    adversarial_search, estimate_exponent, estimate_sublinear_expectation, martingale_bound_check,
    EstimatorConfig, ExponentEstimate, Functional, MartingaleCheckSpec,
};
pub use gcalc::AmbiguityBounds;
pub use integrator::{integrate, linear_closed_form, Method, SdeSpec, SimulationRun};
pub use rng::PathKey;
pub use scenario::{enumerate_family, sample_path, PathBundle, TimeGrid, VolatilityScenario};
pub use lyapunov::{
    check_certificate, check_local_growth, op_h, op_l, op_l_lower, CertificateReport,
    CertificateSpec, CheckGrid, LyapunovFn, Theorem,
};
