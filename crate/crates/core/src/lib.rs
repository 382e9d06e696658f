//! Phasor-domain dynamic simulation of unbalanced three-phase microgrids
//! coupled through a back-to-back converter.
//!
//! The crate is organised bottom-up:
//!
//! - [`phasor`]: phase labels and per-phase complex quantities
//! - [`network`]: the static electrical model and island discovery
//! - [`powerflow`]: per-island unbalanced power flow
//! - [`devices`]: converter, storage and generator dynamics
//! - [`dynamics`]: the fixed-step hybrid engine
//! - [`metrics`]: symmetrical components and unbalance factors
//! - [`scenarios`]: built-in case studies and the scenario file format
//! - [`cli`]: the `mbbsim` command-line front end

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod devices;
pub mod dynamics;
pub mod exec;
pub mod metrics;
pub mod network;
pub mod phasor;
pub mod powerflow;
pub mod scenarios;

pub use dynamics::{run, Simulation, SimulationConfig, SimulationError, TimeSeriesRecord};
pub use exec::ExecutionMode;
pub use network::{build_network, find_islands, NetworkModel};
pub use phasor::{Phase, PhaseSet, PhasorSet};
pub use powerflow::{solve_island, PowerFlowSolution};
pub use scenarios::{build_case_a, build_case_b, build_case_c, load_scenario, Scenario};
