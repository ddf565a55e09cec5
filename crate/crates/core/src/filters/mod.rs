//! Model-based estimators.

mod kalman;
mod map_smoother;
mod pf;
mod rts;

pub use kalman::{ekf_filter, kalman_update, kf_filter, kf_filter_with_input, FilterOutput, Update};
pub use map_smoother::{map_gradient_smoother, map_lipschitz_step, DEFAULT_MAP_ITERS, DEFAULT_MAP_STEP};
pub use pf::{bootstrap_pf, systematic_resample};
pub use rts::{rts_smooth, SmootherOutput};
