//! Timed runs of the reference handlers against remote-READ baselines.
//!
//! Only the server NIC is modelled as fabric resources. The client sits one
//! `wire_one_way_ns` away. An engine core spends `dma_setup_ns` per
//! `submit_dma` and per response; the DMA itself then costs a PCIe round
//! trip plus its fluid transfer.

use std::collections::HashMap;

use serde::Serialize;

use crate::sim::{Hardware, HardwareProfile, Nanos, Path, Sim};
use crate::transport::packet::HEADER_BYTES;

use super::handlers::{self, NODE_BYTES, VALUE_BYTES};
use super::{DmaOp, DmaRequest, EngineConfig, OffloadEngine, OffloadError, ResponseStatus};

const LL_OPCODE: u8 = 0x80;
const BATCH_OPCODE: u8 = 0x81;
const QP: u32 = 1;
const HOST_BASE: u64 = 0x4000_0000;
const HOST_SPAN: u64 = 64 << 20;
const HDR: u64 = HEADER_BYTES as u64;

enum Ev {
    ReqAtServer(u64),
    Parsed(u64),
    DmaStart(DmaRequest),
    DmaDone(DmaRequest),
    RespStart { ctx: u64, bytes: u64 },
    RespAtClient(u64),
    ReadAtServer { id: u64, bytes: u64 },
    ReadAtClient(u64),
}

struct Server {
    hw: Hardware,
    engine: OffloadEngine,
    data_free: Vec<Nanos>,
    engine_free: Vec<Nanos>,
    next_data: usize,
    /// request id -> payload, until the stack core hands it over
    inbox: HashMap<u64, (u8, Vec<u8>)>,
    /// ctx -> client request id
    ctx_req: HashMap<u64, u64>,
    /// ctx -> response payload, until it reaches the client
    outbox: HashMap<u64, Vec<u8>>,
}

impl Server {
    fn new(profile: &HardwareProfile, sim: &mut Sim<Ev>) -> Result<Self, OffloadError> {
        let hw = Hardware::build(profile.clone(), sim.fabric_mut(), 1);
        let data = profile.data_core_count.max(1) as usize;
        let eng = profile.engine_core_count().max(1) as usize;
        let mut engine = OffloadEngine::new(EngineConfig::new(data, eng))?;
        engine.register_dma_region(HOST_BASE, HOST_SPAN)?;
        engine.register_opcode(LL_OPCODE, QP, handlers::linked_list())?;
        engine.register_opcode(BATCH_OPCODE, QP, handlers::batched_read())?;
        Ok(Server {
            hw,
            engine,
            data_free: vec![0; data],
            engine_free: vec![0; eng],
            next_data: 0,
            inbox: HashMap::new(),
            ctx_req: HashMap::new(),
            outbox: HashMap::new(),
        })
    }

    fn send_request(&mut self, sim: &mut Sim<Ev>, id: u64, opcode: u8, payload: Vec<u8>) {
        let path = Path::new()
            .through(self.hw.wire[0].up)
            .through(self.hw.arm.down);
        let bytes = HDR + payload.len() as u64;
        self.inbox.insert(id, (opcode, payload));
        sim.transfer(
            &path,
            bytes,
            self.hw.profile.wire_one_way_ns,
            Ev::ReqAtServer(id),
        );
    }

    fn send_read(&mut self, sim: &mut Sim<Ev>, id: u64, bytes: u64) {
        let path = Path::new().through(self.hw.wire[0].up);
        sim.transfer(
            &path,
            HDR,
            self.hw.profile.wire_one_way_ns,
            Ev::ReadAtServer { id, bytes },
        );
    }

    /// Moves engine output onto engine-core timelines.
    fn pump(&mut self, sim: &mut Sim<Ev>) {
        let now = sim.now();
        let setup = self.hw.profile.dma_setup_ns;
        for r in self.engine.take_dma_requests() {
            let t = now.max(self.engine_free[r.core]) + setup;
            self.engine_free[r.core] = t;
            sim.at(t, Ev::DmaStart(r)).expect("future");
        }
        for resp in self.engine.take_responses() {
            let t = now.max(self.engine_free[resp.core]) + setup;
            self.engine_free[resp.core] = t;
            let bytes = resp.payload.len() as u64;
            if resp.status != ResponseStatus::Ok {
                self.outbox.insert(resp.ctx, Vec::new());
            } else {
                self.outbox.insert(resp.ctx, resp.payload);
            }
            sim.at(
                t,
                Ev::RespStart {
                    ctx: resp.ctx,
                    bytes,
                },
            )
            .expect("future");
        }
    }

    /// Server-side handling; returns a completed client operation as
    /// `(request id, payload)` when one lands at the client.
    fn handle(
        &mut self,
        sim: &mut Sim<Ev>,
        ev: Ev,
    ) -> Result<Option<(u64, Vec<u8>)>, OffloadError> {
        let p = self.hw.profile.clone();
        match ev {
            Ev::ReqAtServer(id) => {
                let core = self.next_data % self.data_free.len();
                self.next_data += 1;
                let t = sim.now().max(self.data_free[core]) + p.rx_process_ns;
                self.data_free[core] = t;
                sim.at(t, Ev::Parsed(id)).expect("future");
            }
            Ev::Parsed(id) => {
                let (opcode, payload) = self.inbox.remove(&id).expect("request in inbox");
                let core = (id as usize) % self.data_free.len();
                let ctx = self.engine.deliver(core, opcode, QP, payload)?;
                self.ctx_req.insert(ctx, id);
                self.engine.poll(sim.now());
                self.pump(sim);
            }
            Ev::DmaStart(r) => {
                let path = match r.op {
                    DmaOp::Read => Path::new()
                        .through(self.hw.host.up)
                        .through(self.hw.arm.down),
                    DmaOp::Write => Path::new()
                        .through(self.hw.arm.up)
                        .through(self.hw.host.down),
                };
                let size = r.size;
                sim.transfer(&path, size, 2 * p.pcie_one_way_ns, Ev::DmaDone(r));
            }
            Ev::DmaDone(r) => {
                self.engine.complete_dma(&r);
                self.engine.poll(sim.now());
                self.pump(sim);
            }
            Ev::RespStart { ctx, bytes } => {
                let path = Path::new()
                    .through(self.hw.arm.up)
                    .through(self.hw.wire[0].down);
                let lat = self.hw.dma_pull_overhead() + p.wire_one_way_ns;
                sim.transfer(&path, HDR + bytes, lat, Ev::RespAtClient(ctx));
            }
            Ev::RespAtClient(ctx) => {
                let id = self.ctx_req.remove(&ctx).expect("known ctx");
                let payload = self.outbox.remove(&ctx).unwrap_or_default();
                return Ok(Some((id, payload)));
            }
            Ev::ReadAtServer { id, bytes } => {
                let path = Path::new()
                    .through(self.hw.host.up)
                    .through(self.hw.wire[0].down);
                let lat = self.hw.dma_pull_overhead() + p.wire_one_way_ns;
                sim.transfer(&path, HDR + bytes, lat, Ev::ReadAtClient(id));
            }
            Ev::ReadAtClient(id) => return Ok(Some((id, Vec::new()))),
        }
        Ok(None)
    }
}

/// Scattered node addresses inside the registered region.
fn node_addrs(n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| HOST_BASE + (i * 7919 % 4096) * 4096 + (i % 8) * NODE_BYTES)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct HopPoint {
    pub hops: usize,
    pub offloaded_ns: Nanos,
    pub baseline_ns: Nanos,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkedListResult {
    pub points: Vec<HopPoint>,
    pub offloaded_slope_ns: f64,
    pub baseline_slope_ns: f64,
    /// baseline slope / offloaded slope
    pub slope_ratio: f64,
}

impl LinkedListResult {
    /// baseline / offloaded latency at `hops`.
    pub fn latency_ratio(&self, hops: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.hops == hops)
            .map(|p| p.baseline_ns as f64 / p.offloaded_ns as f64)
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Lookup latency for the key at the end of a chain of `1..=max_hops` nodes,
/// offloaded versus one remote READ per hop.
pub fn linked_list_bench(
    profile: &HardwareProfile,
    max_hops: usize,
) -> Result<LinkedListResult, OffloadError> {
    if max_hops < 2 {
        return Err(OffloadError::ZeroSize);
    }
    let mut points = Vec::new();
    for hops in 1..=max_hops {
        let mut sim: Sim<Ev> = Sim::new(0);
        let mut server = Server::new(profile, &mut sim)?;
        let head = handlers::write_chain(&mut server.engine, &node_addrs(hops));

        server.send_request(
            &mut sim,
            0,
            LL_OPCODE,
            handlers::linked_list_request(head, hops as u64),
        );
        let mut offloaded = None;
        while let Some(ev) = sim.next_event(Nanos::MAX) {
            if let Some((_, payload)) = server.handle(&mut sim, ev)? {
                assert_eq!(
                    payload,
                    handlers::value_for(hops as u64),
                    "lookup returned the wrong value"
                );
                offloaded = Some(sim.now());
                break;
            }
        }

        let start = sim.now();
        let mut left = hops;
        server.send_read(&mut sim, 0, NODE_BYTES);
        let mut baseline = 0;
        while let Some(ev) = sim.next_event(Nanos::MAX) {
            if server.handle(&mut sim, ev)?.is_some() {
                left -= 1;
                if left == 0 {
                    baseline = sim.now() - start;
                    break;
                }
                server.send_read(&mut sim, 0, NODE_BYTES);
            }
        }
        points.push(HopPoint {
            hops,
            offloaded_ns: offloaded.expect("lookup completes"),
            baseline_ns: baseline,
        });
    }
    let off = slope(
        &points
            .iter()
            .map(|p| (p.hops as f64, p.offloaded_ns as f64))
            .collect::<Vec<_>>(),
    );
    let base = slope(
        &points
            .iter()
            .map(|p| (p.hops as f64, p.baseline_ns as f64))
            .collect::<Vec<_>>(),
    );
    Ok(LinkedListResult {
        points,
        offloaded_slope_ns: off,
        baseline_slope_ns: base,
        slope_ratio: base / off,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchedReadResult {
    pub batch: usize,
    pub item_bytes: u64,
    pub window: usize,
    pub offloaded_gbps: f64,
    pub baseline_gbps: f64,
    pub ratio: f64,
    pub offloaded_requests: u64,
    pub baseline_reads: u64,
}

/// Closed-loop gather throughput: `window` outstanding batched requests of
/// `batch` items each, versus `window` outstanding single-item READs.
pub fn batched_read_bench(
    profile: &HardwareProfile,
    batch: usize,
    item_bytes: u64,
    window: usize,
    duration: Nanos,
) -> Result<BatchedReadResult, OffloadError> {
    if batch == 0 || item_bytes == 0 || window == 0 || item_bytes > VALUE_BYTES * 1024 {
        return Err(OffloadError::ZeroSize);
    }
    let warmup = duration / 5;
    let addrs: Vec<u64> = (0..batch as u64).map(|i| HOST_BASE + i * 4096).collect();

    let mut sim: Sim<Ev> = Sim::new(0);
    let mut server = Server::new(profile, &mut sim)?;
    for (i, &a) in addrs.iter().enumerate() {
        server
            .engine
            .host_write(a, &vec![i as u8; item_bytes as usize]);
    }
    let req = handlers::batched_read_request(item_bytes as u32, &addrs);
    for id in 0..window as u64 {
        server.send_request(&mut sim, id, BATCH_OPCODE, req.clone());
    }
    let mut next = window as u64;
    let (mut bytes, mut done) = (0u64, 0u64);
    while let Some(ev) = sim.next_event(warmup + duration) {
        if let Some((_, payload)) = server.handle(&mut sim, ev)? {
            assert_eq!(
                payload.len() as u64,
                batch as u64 * item_bytes,
                "short gather"
            );
            if sim.now() >= warmup {
                bytes += payload.len() as u64;
                done += 1;
            }
            server.send_request(&mut sim, next, BATCH_OPCODE, req.clone());
            next += 1;
        }
    }
    let offloaded_gbps = bytes as f64 * 8.0 / duration as f64;

    let mut sim: Sim<Ev> = Sim::new(0);
    let mut server = Server::new(profile, &mut sim)?;
    for id in 0..window as u64 {
        server.send_read(&mut sim, id, item_bytes);
    }
    let mut next = window as u64;
    let mut reads = 0u64;
    while let Some(ev) = sim.next_event(warmup + duration) {
        if server.handle(&mut sim, ev)?.is_some() {
            if sim.now() >= warmup {
                reads += 1;
            }
            server.send_read(&mut sim, next, item_bytes);
            next += 1;
        }
    }
    let baseline_gbps = (reads * item_bytes) as f64 * 8.0 / duration as f64;
    Ok(BatchedReadResult {
        batch,
        item_bytes,
        window,
        offloaded_gbps,
        baseline_gbps,
        ratio: offloaded_gbps / baseline_gbps,
        offloaded_requests: done,
        baseline_reads: reads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offloaded_hop_costs_one_dma_round_trip() {
        let p = HardwareProfile::bf3();
        let r = linked_list_bench(&p, 6).unwrap();
        let dma_rtt = (p.dma_setup_ns + 2 * p.pcie_one_way_ns) as f64;
        assert!(
            (r.offloaded_slope_ns - dma_rtt).abs() < 5.0,
            "{}",
            r.offloaded_slope_ns
        );
        assert!(r.baseline_slope_ns > 2.0 * p.wire_one_way_ns as f64);
        assert!(r.latency_ratio(5).unwrap() > 1.0);
    }

    #[test]
    fn batched_read_beats_window_limited_reads() {
        let r = batched_read_bench(&HardwareProfile::bf3(), 64, 64, 16, 500_000).unwrap();
        assert!(r.ratio > 2.0, "{r:?}");
        assert!(r.offloaded_requests > 0);
    }
}
