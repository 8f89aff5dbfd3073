//! Electronic performance support for maintenance work: a simulated RFID
//! workspace, prescribed procedures, a hash-chained trace, a learning-unit
//! repository and the engine that delivers units in context.

pub mod collab;
pub mod delivery;
pub mod fixtures;
pub mod knowledge;
pub mod scenario;
pub mod system;
pub mod tags;
pub mod trace;
pub mod types;
pub mod workflow;

pub use fixtures::FixtureBundle;
pub use scenario::{run_scenario, ScenarioReport, ScenarioScript};
pub use system::{Epss, EpssError};
