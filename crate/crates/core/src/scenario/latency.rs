//! Ping-pong against an L2 reflector on the far end of the wire.
//!
//! Standard QPs submit a 64 B SQE through the pipe, the Arm builds the
//! header and the NIC pulls the payload from host memory. On the way back
//! the packet lands in the Arm LLC, the Arm parses it, pushes the payload
//! to the host buffer and then writes the CQE.
//!
//! Low-latency QPs carry the payload inline in the SQE, so the Arm sends
//! straight from its cache, and on receive the NIC splits the packet and
//! writes the payload directly into the posted buffer. The application
//! polls the first payload byte.

use serde::Serialize;

use crate::sim::{Domain, Hardware, HardwareProfile, Nanos, Path, Sim};
use crate::stats::{Samples, Summary};

/// Arm time to build or parse one header.
pub const HEADER_NS: Nanos = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    Standard,
    LowLatency,
}

impl LatencyMode {
    pub const ALL: [LatencyMode; 2] = [LatencyMode::Standard, LatencyMode::LowLatency];

    pub fn name(self) -> &'static str {
        match self {
            LatencyMode::Standard => "standard",
            LatencyMode::LowLatency => "low_latency",
        }
    }
}

#[derive(Debug, Clone)]
enum Step {
    Compute(Nanos),
    Dma(Path, u64, Nanos),
    Wire,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepTime {
    pub step: &'static str,
    pub ns: Nanos,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyResult {
    pub mode: LatencyMode,
    pub payload_bytes: u64,
    pub round_trips: u64,
    pub rtt_ns: Summary,
    /// Time of each step in the first round trip.
    pub breakdown: Vec<StepTime>,
}

fn steps(hw: &Hardware, mode: LatencyMode, payload: u64) -> Vec<(&'static str, Step)> {
    let path = |s, d| hw.dma_path(s, d).expect("known domain pair");
    let sqe = Path::new().through(hw.host.up).through(hw.arm.down);
    let push = hw.dma_push_overhead();
    let pull = hw.dma_pull_overhead();
    match mode {
        LatencyMode::Standard => vec![
            ("sqe_pipe", Step::Dma(sqe, 64, push)),
            ("tx_header", Step::Compute(HEADER_NS)),
            (
                "payload_fetch",
                Step::Dma(path(Domain::HostMem, Domain::Nic), payload, pull),
            ),
            ("wire_out", Step::Wire),
            ("wire_back", Step::Wire),
            (
                "rx_place",
                Step::Dma(path(Domain::Nic, Domain::ArmLlc), payload, push),
            ),
            ("rx_parse", Step::Compute(HEADER_NS)),
            (
                "deliver",
                Step::Dma(path(Domain::ArmLlc, Domain::HostMem), payload, push),
            ),
            (
                "cqe",
                Step::Dma(
                    Path::new().through(hw.arm.up).through(hw.host.down),
                    64,
                    push,
                ),
            ),
        ],
        LatencyMode::LowLatency => vec![
            ("sqe_pipe", Step::Dma(sqe, 64 + payload, push)),
            ("tx_header", Step::Compute(HEADER_NS)),
            (
                "arm_send",
                Step::Dma(path(Domain::ArmLlc, Domain::Nic), payload, push),
            ),
            ("wire_out", Step::Wire),
            ("wire_back", Step::Wire),
            (
                "direct_place",
                Step::Dma(path(Domain::Nic, Domain::HostMem), payload, push),
            ),
        ],
    }
}

/// Runs `round_trips` sequential ping-pongs of `payload` bytes.
pub fn run_latency(
    profile: &HardwareProfile,
    mode: LatencyMode,
    payload: u64,
    round_trips: u64,
    seed: u64,
) -> LatencyResult {
    let mut sim: Sim<usize> = Sim::new(seed);
    let hw = Hardware::build(profile.clone(), sim.fabric_mut(), 1);
    let plan = steps(&hw, mode, payload);
    let mut samples = Samples::new();
    let mut breakdown = Vec::new();
    for rt in 0..round_trips.max(1) {
        let start = sim.now();
        for (name, step) in &plan {
            let t = sim.now();
            match step {
                Step::Compute(ns) => sim.after(*ns, 0),
                Step::Dma(p, bytes, lat) => {
                    sim.transfer(p, *bytes, *lat, 0);
                }
                Step::Wire => sim.after(profile.wire_one_way_ns, 0),
            }
            sim.next_event(Nanos::MAX).expect("step completes");
            if rt == 0 {
                breakdown.push(StepTime {
                    step: name,
                    ns: sim.now() - t,
                });
            }
        }
        samples.push(sim.now() - start);
    }
    LatencyResult {
        mode,
        payload_bytes: payload,
        round_trips: samples.len() as u64,
        rtt_ns: samples.summary(),
        breakdown,
    }
}
