//! Zero-order-hold control barrier functions.
//!
//! A controller that samples the state every `T` seconds and holds its input
//! in between can leave a safe set that a continuous-time CBF condition would
//! keep invariant. This crate implements margin functions `φ(T, x)` that
//! tighten the CBF condition enough to guarantee inter-sample safety, the
//! reachability and supremum machinery they need, a min-norm QP safety filter,
//! a zero-order-hold simulator and two case-study plants.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod integrate;
pub mod margins;
pub mod model;
pub mod qp;
pub mod reach;
pub mod report;
pub mod sim;
pub mod sup;
pub mod systems;
pub mod verify;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

pub use config::ScenarioConfig;
pub use error::{Error, Result};
pub use margins::{
    global_constants, local_constants, physical_margin, physical_margin_inf, Gain, GlobalConstants,
    LocalConstants, LocalReach, MarginFunction, MarginSetup, PhysicalMargin, Variant,
};
pub use model::{
    hdot, lie_derivatives, Barrier, ClassK, Dynamics, InputSet, SafeSet, WorkingDomain,
};
pub use qp::{build_constraint, solve_filter, Constraint, QpProblem, QpSolution, QpStatus};
pub use reach::{delta0_bound, delta_sup, reach_ball, sup_over_reach, ReachBound, ReachKind};
pub use sim::{min_h_over_trace, run, SimConfig, SimTrace};
pub use sup::{SupConfig, SupEstimate};
pub use systems::{Plant, SystemId};
