//! Cycle-level software model of a spatial accelerator for hybrid sparse
//! attention (sliding, dilated and global windows).
//!
//! The crate is split the same way the hardware flow is:
//!
//! * [`pattern`] declares which (query, key) scores are computed.
//! * [`scheduler`] reorders dilated windows and tiles a pattern onto a fixed
//!   PE array, assigning global tokens to the global PE row and column.
//! * [`numerics`] holds the fixed-point formats and the piecewise-linear
//!   exponential used by the PEs.
//! * [`reference`] is the dense masked-attention oracle and the partial-output
//!   merge, generic over any [`num_traits::Float`].
//! * [`simulator`] executes a schedule pass by pass through the five-stage
//!   datapath, in exact floating point or in fixed point.
//! * [`perf`] turns cycle ledgers into utilization and comparison tables.
//! * [`config`] holds workload presets, run configuration and text formats.

pub mod config;
pub mod error;
pub mod numerics;
pub mod pattern;
pub mod perf;
pub mod reference;
pub mod scheduler;
pub mod simulator;

pub use error::{Error, Result};
pub use pattern::{Boundary, Pattern, PatternStats, WindowSpec};
pub use reference::{FloatTensor, PartialOutput};
pub use scheduler::{ArrayConfig, TilePass, TileSchedule};
pub use simulator::{Datapath, FixedDatapath, FloatDatapath, SimConfig, SimResult, Simulator};

/// Double-precision tensor, the type used by the oracle and for all I/O.
pub type Tensor = FloatTensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = FloatTensor<f32>;
/// Partial output in double precision.
pub type Partial = PartialOutput<f64>;
/// Exact-arithmetic datapath used for golden runs.
pub type GoldenDatapath = FloatDatapath<f64>;
/// Single-precision float datapath.
pub type Float32Datapath = FloatDatapath<f32>;
/// Simulator running the golden (f64) datapath.
pub type GoldenSimulator = Simulator<GoldenDatapath>;
/// Simulator running the 8-bit fixed-point datapath.
pub type FixedSimulator = Simulator<FixedDatapath>;
