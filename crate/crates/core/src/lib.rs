//! Deterministic simulator and protocol library for an off-path SmartNIC
//! network stack: header-only TX, in-cache self-invalidating RX, DMA-only
//! notification pipes, a go-back-N transport and a programmable offload
//! engine, all running over a parameterized hardware model.

pub mod cache;
pub mod config;
pub mod offload;
pub mod pipe;
pub mod rx;
pub mod scenario;
pub mod selftest;
pub mod sim;
pub mod stats;
pub mod transport;
pub mod tx;
pub mod verbs;
