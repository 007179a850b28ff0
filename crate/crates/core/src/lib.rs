//! Non-stationary ODE samplers for diffusion and flow models, the solver
//! families they contain, and bespoke optimization of their coefficients
//! against trajectories of a given velocity field.
//!
//! Numerical code is generic over [`Real`] (`f32`, `f64`); the aliases
//! below fix it to `f64`.

pub mod error;
pub mod eval;
pub mod field;
pub mod nsparams;
pub mod scalar;
pub mod scheduler;
pub mod solver;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use field::{Parameterization, VelocityField};
pub use scalar::{Dual, Real, Scalar};

pub type Scheduler64 = scheduler::Scheduler<f64>;
pub type Field64 = field::SharedField<f64>;
pub type GaussianMixture64 = field::GaussianMixture<f64>;
pub type TimeGrid64 = solver::TimeGrid<f64>;
pub type NSSolverParams64 = nsparams::NSSolverParams<f64>;
pub type STTransform64 = transform::STTransform<f64>;
pub type TrajectoryPair64 = train::TrajectoryPair<f64>;
