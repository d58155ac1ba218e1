//! Echo state network ODE approximator trained purely from the governing
//! equations.
//!
//! A fixed random reservoir is driven by a cheap Euler trial solution; its
//! linear readout is then fitted, without any sampled target data, by
//! minimising constraint residuals derived from the flow invariance of
//! `dy/dt = f(y)`. Training runs in two passes (trial-driven, then
//! self-driven) with a Tikhonov-regularised Gauss-Newton iteration.
//!
//! Module map:
//! - [`problems`]: benchmark vector fields with analytic Jacobians.
//! - [`trial`]: Euler trial solutions, the RK4 reference oracle, washout cropping.
//! - [`reservoir`]: the random recurrent network and its driven hidden sequences.
//! - [`constraints`]: readout maps, residual families and their Jacobians.
//! - [`regression`]: ridge initial guess and the Gauss-Newton engine.
//! - [`pipeline`]: two-pass training, autonomous generation, evaluation.
//! - [`artifacts`]: CSV/JSON outputs and the tolerant report reader.

pub mod artifacts;
pub mod config;
pub mod constraints;
pub mod error;
pub mod gradcheck;
pub mod pipeline;
pub mod problems;
pub mod regression;
pub mod reservoir;
pub mod trial;

pub use error::{Error, Phase, Result};
pub use problems::OdeSystem;
pub use trial::Trajectory;
