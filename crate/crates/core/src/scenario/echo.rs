//! Echo server: every packet from the wire goes up to the host application
//! and straight back out.
//!
//! `naive` runs the whole stack on the Arm with payloads staged in Arm
//! DRAM, so each echoed byte crosses Arm memory four times (RX placement,
//! delivery to host, TX staging, send). `stack` keeps RX payloads in the
//! LLC and sends by header-only TX, so Arm memory is not touched.

use serde::Serialize;

use crate::sim::{Domain, Hardware, HardwareProfile, Nanos, Path, Sim, US};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EchoMode {
    Naive,
    Stack,
}

impl EchoMode {
    pub const ALL: [EchoMode; 2] = [EchoMode::Naive, EchoMode::Stack];

    pub fn name(self) -> &'static str {
        match self {
            EchoMode::Naive => "naive",
            EchoMode::Stack => "stack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct EchoExperiment {
    pub mode: EchoMode,
    pub packet_bytes: u64,
    /// Packets in flight through the server.
    pub window: usize,
    pub warmup: Nanos,
    pub duration: Nanos,
}

impl EchoExperiment {
    pub fn new(mode: EchoMode) -> Self {
        EchoExperiment {
            mode,
            packet_bytes: 8192,
            window: 256,
            warmup: 300 * US,
            duration: 1000 * US,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EchoResult {
    pub mode: EchoMode,
    pub packet_bytes: u64,
    pub echoed_gbps: f64,
    pub arm_mem_gbps: f64,
    /// Arm memory bytes per echoed byte.
    pub mem_traversals: f64,
    pub packets: u64,
    /// (time, cumulative echoed bytes) every 10 µs.
    pub series: Vec<(Nanos, u64)>,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Arrive(usize),
    Leg { pkt: usize, leg: usize },
    Sample,
    WindowStart,
}

pub fn run_echo(exp: &EchoExperiment, profile: &HardwareProfile, seed: u64) -> EchoResult {
    let mut sim: Sim<Ev> = Sim::new(seed);
    let hw = Hardware::build(profile.clone(), sim.fabric_mut(), 1);
    let push = hw.dma_push_overhead();
    let pull = hw.dma_pull_overhead();
    let path = |s, d| hw.dma_path(s, d).expect("known domain pair");
    let legs: Vec<(Path, Nanos)> = match exp.mode {
        EchoMode::Naive => vec![
            (path(Domain::Nic, Domain::ArmMem), push),
            (path(Domain::ArmMem, Domain::HostMem), push),
            (path(Domain::HostMem, Domain::ArmMem), pull),
            (path(Domain::ArmMem, Domain::Nic), pull),
        ],
        EchoMode::Stack => vec![
            (path(Domain::Nic, Domain::ArmLlc), push),
            (path(Domain::ArmLlc, Domain::HostMem), push),
            (path(Domain::HostMem, Domain::Nic), pull),
        ],
    };
    let t0 = exp.warmup;
    let t1 = exp.warmup + exp.duration;
    let mut echoed = 0u64;
    let mut echoed_window = 0u64;
    let mut packets = 0u64;
    let mut series = Vec::new();
    let mut mem_at_t0 = 0.0;

    // the client's window arrives back to back at line rate
    let gap = (exp.packet_bytes as f64 * 8.0 / profile.endpoint_rate_gbps).ceil() as Nanos;
    for pkt in 0..exp.window {
        sim.at(pkt as Nanos * gap, Ev::Arrive(pkt)).unwrap();
    }
    sim.at(0, Ev::Sample).unwrap();
    sim.at(t0, Ev::WindowStart).unwrap();

    sim.run_until(t1, |sim, ev| match ev {
        Ev::Arrive(pkt) => {
            let (p, lat) = &legs[0];
            sim.transfer(p, exp.packet_bytes, *lat, Ev::Leg { pkt, leg: 0 });
        }
        Ev::Leg { pkt, leg } => {
            let next = (leg + 1) % legs.len();
            if next == 0 {
                echoed += exp.packet_bytes;
                if sim.now() > t0 {
                    echoed_window += exp.packet_bytes;
                    packets += 1;
                }
            }
            let (p, lat) = &legs[next];
            sim.transfer(p, exp.packet_bytes, *lat, Ev::Leg { pkt, leg: next });
        }
        Ev::Sample => {
            series.push((sim.now(), echoed));
            sim.after(10 * US, Ev::Sample);
        }
        Ev::WindowStart => mem_at_t0 = sim.fabric().resource(hw.arm_mem).bytes_moved(),
    });
    let mem = sim.fabric().resource(hw.arm_mem).bytes_moved() - mem_at_t0;
    let window = exp.duration as f64;
    EchoResult {
        mode: exp.mode,
        packet_bytes: exp.packet_bytes,
        echoed_gbps: echoed_window as f64 * 8.0 / window,
        arm_mem_gbps: mem * 8.0 / window,
        mem_traversals: if echoed_window > 0 {
            mem / echoed_window as f64
        } else {
            0.0
        },
        packets,
        series,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_echo_is_memory_bound() {
        let p = HardwareProfile::bf3();
        let r = run_echo(&EchoExperiment::new(EchoMode::Naive), &p, 1);
        let bound = p.arm_mem_bw_gbps / 4.0;
        assert!(
            (r.echoed_gbps / bound - 1.0).abs() < 0.05,
            "{}",
            r.echoed_gbps
        );
        assert!((r.mem_traversals - 4.0).abs() < 0.1, "{}", r.mem_traversals);
    }

    #[test]
    fn stack_echo_avoids_arm_memory() {
        let r = run_echo(
            &EchoExperiment::new(EchoMode::Stack),
            &HardwareProfile::bf3(),
            1,
        );
        assert_eq!(r.arm_mem_gbps, 0.0);
        assert!(r.echoed_gbps > 300.0, "{}", r.echoed_gbps);
    }
}
