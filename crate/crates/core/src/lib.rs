//! Simulation of remote voting over an onion-routing network and the
//! traffic-correlation analysis that links voters to ballot boxes.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, the command line
//! and packet-capture import live in the `votetrace` crate.

#![no_std]

extern crate alloc;

pub mod addr;
pub mod capture;
pub mod config;
pub mod dist;
pub mod engine;
pub mod eval;
pub mod pattern;
pub mod rng;
pub mod stats;
pub mod time;
pub mod world;

pub use addr::Addr;
pub use capture::{AttackerView, PacketRecord, RecordSink};
pub use config::{BehaviorKind, ScenarioConfig, VoteProtocolSpec};
pub use engine::NodeId;
pub use eval::{GroundTruth, Metrics, VoteRecord};
pub use pattern::{MatchParams, MatchResult, NoiseParams, Pattern, Step};
pub use time::SimTime;
pub use world::{simulate, SimOutput, Simulation, Topology};
