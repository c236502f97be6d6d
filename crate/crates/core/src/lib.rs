//! Least-squares learning for episodic, finite-horizon, continuous-time
//! linear-quadratic control.
//!
//! The crate covers the whole loop: Riccati solvers for the continuous and
//! piecewise-constant optimal gains, exact expected costs through Lyapunov
//! equations, Euler–Maruyama episode simulation with keyed random substreams,
//! ridge least-squares estimation of the drift, the two phase-based learning
//! algorithms, and experiment drivers that check their convergence and
//! regret behaviour.

pub mod algorithms;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod sim;
pub mod stats;

pub use error::{LqError, Result};
pub use model::{CostSpec, GainKind, GainPath, LqProblem, ModelTheta};
