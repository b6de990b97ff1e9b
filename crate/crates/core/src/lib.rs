//! Extremum-seeking synthesis of finite-horizon controllers.
//!
//! A controller is a linear combination of time basis functions over the
//! horizon. Each episode of the plant yields one (possibly noisy) scalar cost,
//! and the coefficients are tuned by sinusoidally perturbed extremum seeking.
//! A Riccati oracle provides the exact optimum for linear-quadratic problems.

pub mod basis;
pub mod error;
pub mod es;
pub mod feedback;
pub mod harness;
mod linalg;
pub mod lqr;
pub mod ode;
pub mod scenario;

pub use basis::{BasisKind, BasisSpec, BasisTable, ControllerCoefficients, SampledBasis};
pub use error::{Error, Result};
pub use es::{run_es, EsConfig, EsRunRecord};
pub use linalg::{is_symmetric, min_eigenvalue};
pub use ode::{integrate_rk4, quadrature_trapezoid, StateTrajectory, TimeGrid};
pub use scenario::{NoiseModel, Scenario, ScenarioParts};
