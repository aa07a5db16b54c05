//! Partially explicit multiscale time stepping for high-contrast parabolic
//! problems, with a POD-compressed neural surrogate replacing the implicit
//! component.

pub mod cem;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod field;
pub mod grid;
pub mod integrators;
pub(crate) mod io;
pub mod linalg;
pub mod pod;
pub mod scalar;
pub mod stability;
pub mod surrogate;

pub use error::{Error, Result};
pub use scalar::{lit, Scalar};

/// Double-precision instantiations used by the experiment pipeline.
pub type Grid = grid::FineGrid<f64>;
pub type Field = field::ScalarCellField<f64>;
pub type Spaces = cem::MultiscaleSpaces<f64>;
pub type Coarse = integrators::CoarseSystem<f64>;
pub type Fine = integrators::FineSolver<f64>;
pub type Traj = integrators::Trajectory<f64>;
pub type Pod = pod::PodBasis<f64>;
pub type Network = surrogate::Mlp<f64>;
pub type Report = stability::StabilityReport<f64>;

/// Single-precision instantiations.
pub type GridF32 = grid::FineGrid<f32>;
pub type FieldF32 = field::ScalarCellField<f32>;
pub type SpacesF32 = cem::MultiscaleSpaces<f32>;
pub type CoarseF32 = integrators::CoarseSystem<f32>;
pub type FineF32 = integrators::FineSolver<f32>;
pub type TrajF32 = integrators::Trajectory<f32>;
pub type PodF32 = pod::PodBasis<f32>;
pub type NetworkF32 = surrogate::Mlp<f32>;
pub type ReportF32 = stability::StabilityReport<f32>;
