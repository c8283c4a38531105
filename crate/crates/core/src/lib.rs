//! Single-launch distributed mixture-of-experts operator on an emulated
//! PGAS fabric.
//!
//! Simulated devices run a persistent group of actors (scheduler,
//! subscriber, processors) that exchange token tiles through one-sided
//! puts into a symmetric tensor layout. Gate, dispatch, expert FFN and
//! combine proceed tile by tile with no phase barriers.

pub mod error;
pub mod gate;
pub mod harness;
pub mod layout;
pub mod oracle;
pub mod pgas;
pub mod runtime;
pub mod tiled_blas;
pub mod types;

pub use error::{ConfigError, LayoutError, ProtocolViolation, RuntimeFault};
pub use gate::{dispatch_manifest, gate_forward, GateOutput, Route, RoutingTable};
pub use layout::{size_l, validate_write, Coord, LayoutSpec, WriteDescriptor};
pub use pgas::{Fabric, PayloadBytes, Signal};
pub use runtime::{forward, ForwardOutput, RuntimeOptions, ScheduleMode};
pub use types::{expert_capacity, padded_capacity, Activation, ExpertWeights, GateWeights, MoeConfig, TokenMatrix};
