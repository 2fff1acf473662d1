//! Random Batch Method accelerated Model Predictive Control (RBM-MPC) for
//! unconstrained linear-quadratic problems, with classical MPC and
//! infinite-horizon LQR baselines and a Monte-Carlo experiment harness.
//!
//! All numerics are generic over the scalar type (see [`Scalar`]); the `*64`
//! aliases at the crate root fix it to `f64`.

pub mod error;
pub mod experiment;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod ocp;
pub mod rbm;
pub mod riccati;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LqProblem64 = model::LqProblem<f64>;
pub type Splitting64 = model::Splitting<f64>;
pub type RbmSchedule64 = rbm::RbmSchedule<f64>;
pub type TimeGrid64 = integrator::TimeGrid<f64>;
pub type Trajectory64 = integrator::Trajectory<f64>;
pub type StabilizedLoop64 = riccati::StabilizedLoop<f64>;
pub type HorizonPlan64 = mpc::HorizonPlan<f64>;
pub type MpcRun64 = mpc::MpcRun<f64>;
pub type Scenario64 = experiment::Scenario<f64>;
