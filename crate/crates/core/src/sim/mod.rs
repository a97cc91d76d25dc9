//! Discrete-event kernel and the off-path SmartNIC hardware model.
//!
//! The NIC switch has three duplex endpoints (host, Arm, wire). Each
//! direction of an endpoint is an independent [`fabric::Resource`]; Arm DRAM
//! is one more resource shared by reads and writes. Packets are discrete
//! events, their byte movement is fluid.

pub mod fabric;
pub mod kernel;
pub mod profile;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use fabric::{Fabric, Path, ResourceId, TransferId};
pub use kernel::{EventQueue, SimEvent};
pub use profile::{HardwareProfile, ProcessDist};

/// Simulated time in integer nanoseconds.
pub type Nanos = u64;

pub const US: Nanos = 1_000;
pub const MS: Nanos = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {fire_time} ns but clock is already at {now} ns")]
    Causality { now: Nanos, fire_time: Nanos },
    #[error("no DMA path from {0:?} to {1:?}")]
    UnknownDomainPair(Domain, Domain),
}

/// Memory domains reachable by the DMA engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    HostMem,
    ArmMem,
    ArmLlc,
    Nic,
}

/// One duplex NIC-switch endpoint. `up` carries traffic into the switch,
/// `down` carries traffic out of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub up: ResourceId,
    pub down: ResourceId,
}

/// Resource handles of one SmartNIC plus its profile.
#[derive(Debug, Clone)]
pub struct Hardware {
    pub profile: HardwareProfile,
    pub host: Endpoint,
    pub arm: Endpoint,
    pub wire: Vec<Endpoint>,
    pub arm_mem: ResourceId,
}

impl Hardware {
    pub fn build<E>(profile: HardwareProfile, fabric: &mut Fabric<E>, wire_ports: usize) -> Self {
        assert!(wire_ports >= 1);
        Self::build_named("", profile, fabric, wire_ports)
    }

    /// Like [`Hardware::build`] but prefixes resource names (for multi-node scenarios).
    pub fn build_named<E>(
        prefix: &str,
        profile: HardwareProfile,
        fabric: &mut Fabric<E>,
        wire_ports: usize,
    ) -> Self {
        let rate = profile.endpoint_rate_gbps;
        let mut ep = |name: &str| Endpoint {
            up: fabric.add_resource(format!("{prefix}{name}.up"), rate),
            down: fabric.add_resource(format!("{prefix}{name}.down"), rate),
        };
        let host = ep("host");
        let arm = ep("arm");
        let wire = (0..wire_ports)
            .map(|i| {
                if wire_ports == 1 {
                    ep("wire")
                } else {
                    ep(&format!("wire{i}"))
                }
            })
            .collect();
        let arm_mem = fabric.add_resource(format!("{prefix}arm_mem"), profile.arm_mem_bw_gbps);
        Hardware {
            profile,
            host,
            arm,
            wire,
            arm_mem,
        }
    }

    /// Switch path of a DMA between two domains. Arm DRAM endpoints also
    /// charge the memory resource once.
    pub fn dma_path(&self, src: Domain, dst: Domain) -> Result<Path, SimError> {
        use Domain::*;
        let wire = self.wire[0];
        let path = match (src, dst) {
            (HostMem, ArmMem) => Path::new()
                .through(self.host.up)
                .through(self.arm.down)
                .through(self.arm_mem),
            (HostMem, ArmLlc) => Path::new().through(self.host.up).through(self.arm.down),
            (ArmMem, HostMem) => Path::new()
                .through(self.arm.up)
                .through(self.host.down)
                .through(self.arm_mem),
            (ArmLlc, HostMem) => Path::new().through(self.arm.up).through(self.host.down),
            (HostMem, Nic) => Path::new().through(self.host.up).through(wire.down),
            (Nic, HostMem) => Path::new().through(wire.up).through(self.host.down),
            (ArmMem, Nic) => Path::new()
                .through(self.arm.up)
                .through(wire.down)
                .through(self.arm_mem),
            (ArmLlc, Nic) => Path::new().through(self.arm.up).through(wire.down),
            (Nic, ArmMem) => Path::new()
                .through(wire.up)
                .through(self.arm.down)
                .through(self.arm_mem),
            (Nic, ArmLlc) => Path::new().through(wire.up).through(self.arm.down),
            _ => return Err(SimError::UnknownDomainPair(src, dst)),
        };
        Ok(path)
    }

    /// Fixed latency of a pushed DMA (write to the destination).
    pub fn dma_push_overhead(&self) -> Nanos {
        self.profile.dma_setup_ns + self.profile.pcie_one_way_ns
    }

    /// Fixed latency of a pulled DMA: request crossing plus data crossing.
    pub fn dma_pull_overhead(&self) -> Nanos {
        self.profile.dma_setup_ns + 2 * self.profile.pcie_one_way_ns
    }
}

/// Emulated MMIO window with a hard per-device write rate.
#[derive(Debug, Clone)]
pub struct MmioPort {
    interval_ns: f64,
    pcie_one_way_ns: Nanos,
    next_slot: f64,
    writes: u64,
}

impl MmioPort {
    pub fn new(profile: &HardwareProfile) -> Self {
        MmioPort {
            interval_ns: 1e9 / profile.mmio_rate_per_s,
            pcie_one_way_ns: profile.pcie_one_way_ns,
            next_slot: 0.0,
            writes: 0,
        }
    }

    /// Issues a write of at most 64 bytes at `now`; returns its completion time.
    pub fn write(&mut self, now: Nanos, payload_bytes: usize) -> Nanos {
        assert!(payload_bytes <= 64, "MMIO payload limited to 64 bytes");
        let slot = self.next_slot.max(now as f64);
        self.next_slot = slot + self.interval_ns;
        self.writes += 1;
        slot.ceil() as Nanos + self.pcie_one_way_ns
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceMetrics {
    pub name: String,
    pub capacity_gbps: f64,
    pub bytes: f64,
    pub mean_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub time_ns: Nanos,
    pub events: u64,
    pub resources: Vec<ResourceMetrics>,
}

impl MetricsSnapshot {
    pub fn resource(&self, name: &str) -> Option<&ResourceMetrics> {
        self.resources.iter().find(|r| r.name == name)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Event kernel plus fluid fabric, single threaded.
pub struct Sim<E> {
    queue: EventQueue<E>,
    fabric: Fabric<E>,
    pub rng: ChaCha8Rng,
    events: u64,
}

impl<E> Sim<E> {
    pub fn new(seed: u64) -> Self {
        Sim {
            queue: EventQueue::new(),
            fabric: Fabric::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            events: 0,
        }
    }

    pub fn now(&self) -> Nanos {
        self.queue.now()
    }

    pub fn fabric(&self) -> &Fabric<E> {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut Fabric<E> {
        &mut self.fabric
    }

    pub fn at(&mut self, t: Nanos, action: E) -> Result<u64, SimError> {
        self.queue.schedule(t, action)
    }

    pub fn after(&mut self, dt: Nanos, action: E) {
        let t = self.now() + dt;
        self.queue
            .schedule(t, action)
            .expect("relative schedule is never in the past");
    }

    pub fn transfer(
        &mut self,
        path: &Path,
        bytes: u64,
        extra_latency: Nanos,
        on_done: E,
    ) -> TransferId {
        let now = self.now();
        self.fabric.start(now, path, bytes, extra_latency, on_done)
    }

    /// Pushed DMA between domains: setup + PCIe crossing + fluid transfer.
    pub fn dma(
        &mut self,
        hw: &Hardware,
        src: Domain,
        dst: Domain,
        bytes: u64,
        on_done: E,
    ) -> Result<TransferId, SimError> {
        let path = hw.dma_path(src, dst)?;
        Ok(self.transfer(&path, bytes, hw.dma_push_overhead(), on_done))
    }

    /// Next due event no later than `limit`; integrates the fabric along the way.
    pub fn next_event(&mut self, limit: Nanos) -> Option<E> {
        loop {
            let tq = self.queue.peek_time();
            let tf = self.fabric.next_completion();
            match (tq, tf) {
                (_, Some(f)) if f <= limit && tq.is_none_or(|q| f < q) => {
                    self.queue.advance_to(f);
                    for (due, e) in self.fabric.advance(f) {
                        self.queue
                            .schedule(due, e)
                            .expect("completion is never in the past");
                    }
                }
                (Some(q), _) if q <= limit => {
                    self.fabric.advance(q).into_iter().for_each(|(due, e)| {
                        self.queue
                            .schedule(due, e)
                            .expect("completion is never in the past");
                    });
                    let ev = self.queue.pop_until(limit).expect("peeked event");
                    self.events += 1;
                    return Some(ev.action);
                }
                _ => {
                    if self.now() < limit {
                        for (due, e) in self.fabric.advance(limit) {
                            self.queue
                                .schedule(due, e)
                                .expect("completion is never in the past");
                        }
                        self.queue.advance_to(limit);
                    }
                    return None;
                }
            }
        }
    }

    /// Runs every event due by `t_end` through `handler`, then sets the clock to `t_end`.
    pub fn run_until(
        &mut self,
        t_end: Nanos,
        mut handler: impl FnMut(&mut Sim<E>, E),
    ) -> MetricsSnapshot {
        assert!(t_end >= self.now(), "run_until into the past");
        while let Some(ev) = self.next_event(t_end) {
            handler(self, ev);
        }
        self.snapshot()
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let elapsed = self.now().max(1) as f64;
        MetricsSnapshot {
            time_ns: self.now(),
            events: self.events,
            resources: self
                .fabric
                .resources()
                .map(|(_, r)| ResourceMetrics {
                    name: r.name.clone(),
                    capacity_gbps: r.capacity_gbps,
                    bytes: r.bytes_moved(),
                    mean_utilization: r.bytes_moved()
                        / (fabric::gbps_to_bytes_per_ns(r.capacity_gbps) * elapsed),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    enum Ev {
        Done(u32),
    }

    fn bf3_sim() -> (Sim<Ev>, Hardware) {
        let mut sim = Sim::new(1);
        let hw = Hardware::build(HardwareProfile::bf3(), sim.fabric_mut(), 1);
        (sim, hw)
    }

    #[test]
    fn empty_run_gives_zeroed_snapshot() {
        let (mut sim, _) = bf3_sim();
        let snap = sim.run_until(5_000, |_, _| unreachable!());
        assert_eq!(snap.time_ns, 5_000);
        assert!(snap
            .resources
            .iter()
            .all(|r| r.bytes == 0.0 && r.mean_utilization == 0.0));
    }

    #[test]
    fn small_dma_latency_formula() {
        let (mut sim, hw) = bf3_sim();
        sim.dma(&hw, Domain::HostMem, Domain::ArmLlc, 64, Ev::Done(0))
            .unwrap();
        let mut at = None;
        sim.run_until(10_000, |s, _| at = Some(s.now()));
        // 64 B at 50 B/ns rounds up to 2 ns of serialization.
        assert_eq!(at, Some(200 + 300 + 2));
    }

    #[test]
    fn arm_mem_dma_is_charged_to_memory() {
        let (mut sim, hw) = bf3_sim();
        sim.dma(&hw, Domain::ArmMem, Domain::HostMem, 1 << 20, Ev::Done(0))
            .unwrap();
        let snap = sim.run_until(1_000_000, |_, _| {});
        let mem = snap.resource("arm_mem").unwrap();
        assert!((mem.bytes - (1u64 << 20) as f64).abs() < 1e-3);
    }

    #[test]
    fn unknown_domain_pair() {
        let (mut sim, hw) = bf3_sim();
        assert_eq!(
            sim.dma(&hw, Domain::ArmMem, Domain::ArmLlc, 64, Ev::Done(0))
                .unwrap_err(),
            SimError::UnknownDomainPair(Domain::ArmMem, Domain::ArmLlc)
        );
    }

    #[test]
    fn mmio_rate_bound() {
        let p = HardwareProfile::bf3();
        let mut port = MmioPort::new(&p);
        let first = port.write(0, 64);
        assert_eq!(first, p.pcie_one_way_ns);
        let mut last = first;
        for _ in 0..9 {
            last = port.write(0, 64);
        }
        assert!(last - first >= 9 * MS);
    }
}
