//! State-space models, trajectory simulation and dataset files.

mod dataset;
pub mod lorenz;
mod model;
mod simulate;

pub use dataset::{Dataset, Trajectory};
pub use model::{numeric_jacobian, JacMap, LinearModel, NonlinearModel, StateSpaceModel, VecMap};
pub use simulate::{simulate, simulate_with_input};
