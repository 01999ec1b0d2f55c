//! Kernel EDMD surrogates of control-affine systems with certified MPC.

pub mod bounds;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod kernel;
pub mod mpc;
pub mod sampling;
pub mod stability;
pub mod surrogate;
pub mod systems;

pub use bounds::{empirical_error_scan, ErrorBoundReport, ScanOptions, StabilityMarginReport};
pub use dynamics::{Differentiable, Dynamics, LinearModel};
pub use error::{Error, Result};
pub use geometry::AxisBox;
pub use kernel::{GridKind, GridSpec, KernelSpec, PointSet};
pub use mpc::{ClosedLoopTrace, MpcConfig, OcpSolution, SolverOptions, SolverStatus};
pub use sampling::ClusterDataset;
pub use stability::GrowthBoundSequence;
pub use surrogate::SurrogateModel;
pub use systems::{
    make_four_tank, make_four_tank_shifted, make_linear, make_van_der_pol, shift_to_origin,
    ControlAffineSystem, EquilibriumSpec, TankParams,
};
