//! Optimization of multi-agent prompt configurations represented as typed,
//! editable textual parameter graphs.

pub mod cluster;
pub mod gateway;
pub mod gradient;
pub mod graph;
pub mod memory;
pub mod optimizer;
pub mod orchestrator;
pub mod sim;
pub mod template;
pub mod util;
