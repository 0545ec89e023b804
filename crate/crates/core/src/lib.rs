//! Deterministic simulation of distributed, fault-tolerant NF state
//! management, with a reference oracle and an experiment harness.

pub mod config;
pub mod consensus;
pub mod control;
pub mod fabric;
pub mod harness;
pub mod model;
pub mod nf;
pub mod oracle;
pub mod sim;
pub mod stamper;
