//! TX path: shadow regions, shared send queues and the header-only gather
//! path, plus the two payload-staging baselines.
//!
//! In header-only mode a data core writes one header into the LLC and the
//! NIC gathers it together with the payload straight from host memory.
//! The baselines first pull the payload into Arm memory (by DMA, or by RDMA
//! looped back through the NIC port), then send header and payload from
//! there.

pub mod shadow;
pub mod sq;

use serde::Serialize;
use thiserror::Error;

use crate::cache::{CacheGeometry, Llc};
use crate::sim::fabric::Path;
use crate::sim::{Hardware, HardwareProfile, Nanos, Sim, US};
use crate::transport::packet::{DEFAULT_MTU, HEADER_BYTES};

pub use shadow::{ShadowMemoryRegion, ShadowTable};
pub use sq::SqMap;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxError {
    #[error("translation fault in context {context_id} at {arm_va:#x}+{len}")]
    Fault {
        context_id: u32,
        arm_va: u64,
        len: u64,
    },
    #[error("host range at {host_va:#x} already registered in context {context_id}")]
    Overlap { context_id: u32, host_va: u64 },
    #[error("region size must be positive")]
    ZeroSize,
    #[error("unknown send queue {0}")]
    UnknownSq(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TxMode {
    HeaderOnly,
    DmaAssist,
    RdmaAssist,
}

impl TxMode {
    pub const ALL: [TxMode; 3] = [TxMode::HeaderOnly, TxMode::DmaAssist, TxMode::RdmaAssist];

    pub fn name(self) -> &'static str {
        match self {
            TxMode::HeaderOnly => "header_only",
            TxMode::DmaAssist => "dma_assist",
            TxMode::RdmaAssist => "rdma_assist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxOpcode {
    Send,
    Write,
    ReadResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxWorkItem {
    pub sq_id: u32,
    pub opcode: TxOpcode,
    pub arm_va: u64,
    pub length: u64,
    pub remote_addr: u64,
    pub signaled: bool,
}

/// Validates an item against the shadow table and returns the host VA the
/// NIC will gather from.
pub fn resolve(item: &TxWorkItem, sqs: &SqMap, shadow: &ShadowTable) -> Result<u64, TxError> {
    let ctx = sqs.context_of(item.sq_id)?;
    shadow.translate(ctx, item.arm_va, item.length)
}

/// Wire bytes of one op: payload plus one header per MTU segment.
pub fn wire_bytes(len: u64) -> u64 {
    len + len.div_ceil(DEFAULT_MTU as u64).max(1) * HEADER_BYTES as u64
}

/// Switch paths used by one TX op.
#[derive(Debug, Clone)]
pub struct TxPaths {
    pub header: Path,
    pub payload: Path,
    pub stage: Path,
    pub send: Path,
}

impl TxPaths {
    pub fn new(hw: &Hardware) -> Self {
        let wire = hw.wire[0];
        TxPaths {
            // header read by the NIC from the Arm LLC
            header: Path::new().through(hw.arm.up).through(wire.down),
            payload: Path::new().through(hw.host.up).through(wire.down),
            stage: Path::new()
                .through(hw.host.up)
                .through(hw.arm.down)
                .through(hw.arm_mem),
            send: Path::new()
                .through(hw.arm.up)
                .through(wire.down)
                .through(hw.arm_mem),
        }
    }

    /// RDMA staging is looped back through the Arm's own NIC function, so
    /// the payload crosses the Arm endpoint downlink twice.
    pub fn rdma_stage(hw: &Hardware) -> Path {
        Path::new()
            .through(hw.host.up)
            .weighted(hw.arm.down, 2.0)
            .through(hw.arm_mem)
    }
}

#[derive(Debug, Clone)]
pub struct TxExperiment {
    pub mode: TxMode,
    pub payload: u64,
    pub sqs: usize,
    pub depth: usize,
    /// Arm core time to build one header.
    pub header_ns: Nanos,
    pub warmup: Nanos,
    pub window: Nanos,
    /// Reverse (wire to Arm memory) load injected after the first window.
    pub rx_gbps: Option<f64>,
    pub rx_packet: u64,
    pub rx_queue: usize,
    pub settle: Nanos,
}

impl TxExperiment {
    pub fn new(mode: TxMode, payload: u64) -> Self {
        TxExperiment {
            mode,
            payload,
            sqs: 8,
            depth: 64,
            header_ns: 100,
            warmup: 50 * US,
            window: 200 * US,
            rx_gbps: None,
            rx_packet: 8192,
            rx_queue: 256,
            settle: 20 * US,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TxResult {
    pub mode: String,
    pub payload: u64,
    pub ops: u64,
    pub tx_gbps: f64,
    pub tx_gbps_with_rx: Option<f64>,
    pub rx_gbps: Option<f64>,
    pub rx_drops: u64,
    pub arm_mem_bytes_per_op: f64,
    pub arm_up_bytes_per_op: f64,
    pub header_llc_memory_bytes: u64,
    /// (time, cumulative payload bytes) sampled every 10 µs.
    #[serde(skip)]
    pub series: Vec<(Nanos, u64)>,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Issue { sq: usize },
    Staged { op: usize },
    Built { op: usize },
    PartDone { op: usize },
    RxArrive,
    RxDone,
    Sample,
    Writeback,
}

struct Op {
    sq: usize,
    parts: u8,
}

pub fn run_tx(exp: &TxExperiment, profile: &HardwareProfile, seed: u64) -> TxResult {
    let mut sim: Sim<Ev> = Sim::new(seed);
    let hw = Hardware::build(profile.clone(), sim.fabric_mut(), 1);
    // zero-cost resource on the payload-carrying leg, for continuous goodput
    let meter = sim.fabric_mut().add_resource("tx.payload_meter", 1e9);
    let mut paths = TxPaths::new(&hw);
    paths.payload.add(meter, 1.0);
    paths.send.add(meter, 1.0);
    let rdma_stage = TxPaths::rdma_stage(&hw);
    let mut llc = Llc::new(CacheGeometry::from_profile(profile).expect("valid profile"));
    let mut sqmap = SqMap::new(profile.data_core_count as usize);
    let sq_core: Vec<usize> = (0..exp.sqs)
        .map(|_| {
            let s = sqmap.create_sq(0);
            sqmap.core_of(s).unwrap()
        })
        .collect();
    let mut core_free = vec![0 as Nanos; sqmap.cores()];
    let mut header_slot = vec![0u64; sqmap.cores()];
    const HEADER_RING: u64 = 256;

    let mut ops: Vec<Op> = Vec::new();
    let mut free_ops: Vec<usize> = Vec::new();
    for sq in 0..exp.sqs {
        for _ in 0..exp.depth {
            sim.at(0, Ev::Issue { sq }).unwrap();
        }
    }
    sim.at(0, Ev::Sample).unwrap();

    let t_inject = exp.warmup + exp.window;
    let t_end = if exp.rx_gbps.is_some() {
        t_inject + exp.settle + exp.window
    } else {
        t_inject
    };
    if exp.rx_gbps.is_some() {
        sim.at(t_inject, Ev::RxArrive).unwrap();
    }
    let rx_gap = exp
        .rx_gbps
        .map(|g| (exp.rx_packet as f64 * 8.0 / g).round() as Nanos);
    let rx_path = Path::new()
        .through(hw.wire[0].up)
        .through(hw.arm.down)
        .through(hw.arm_mem);

    let mut done_bytes: u64 = 0;
    let mut completed_ops: u64 = 0;
    let mut rx_inflight = 0usize;
    let mut rx_drops = 0u64;
    let mut rx_bytes_after = 0u64;
    let mut header_mem = 0u64;
    let mut res = TxResult {
        mode: exp.mode.name().into(),
        payload: exp.payload,
        ..Default::default()
    };
    let wire = wire_bytes(exp.payload);

    let mark_times = [exp.warmup, t_inject, t_inject + exp.settle, t_end];
    let mut next_mark = 0;
    let mut mem_at = [0f64; 4];
    let mut up_at = [0f64; 4];
    let mut meter_at = [0f64; 4];

    let mut snapshot_marks = |sim: &Sim<Ev>, next_mark: &mut usize| {
        while *next_mark < 4 && sim.now() >= mark_times[*next_mark] {
            mem_at[*next_mark] = sim.fabric().resource(hw.arm_mem).bytes_moved();
            up_at[*next_mark] = sim.fabric().resource(hw.arm.up).bytes_moved();
            meter_at[*next_mark] = sim.fabric().resource(meter).bytes_moved();
            *next_mark += 1;
        }
    };

    sim.run_until(t_end, |sim, ev| {
        snapshot_marks(sim, &mut next_mark);
        let now = sim.now();
        match ev {
            Ev::Issue { sq } => {
                let op = free_ops.pop().unwrap_or_else(|| {
                    ops.push(Op { sq, parts: 0 });
                    ops.len() - 1
                });
                ops[op] = Op { sq, parts: 0 };
                match exp.mode {
                    TxMode::HeaderOnly => {
                        let c = sq_core[sq];
                        let start = now.max(core_free[c]);
                        core_free[c] = start + exp.header_ns;
                        sim.at(core_free[c], Ev::Built { op }).unwrap();
                    }
                    TxMode::DmaAssist => {
                        sim.transfer(
                            &paths.stage,
                            exp.payload,
                            hw.dma_pull_overhead(),
                            Ev::Staged { op },
                        );
                    }
                    TxMode::RdmaAssist => {
                        sim.transfer(
                            &rdma_stage,
                            exp.payload,
                            hw.dma_pull_overhead(),
                            Ev::Staged { op },
                        );
                    }
                }
            }
            Ev::Staged { op } => {
                let c = sq_core[ops[op].sq];
                let start = now.max(core_free[c]);
                core_free[c] = start + exp.header_ns;
                sim.at(core_free[c], Ev::Built { op }).unwrap();
            }
            Ev::Built { op } => {
                let c = sq_core[ops[op].sq];
                let addr =
                    0x4000_0000 + (c as u64 * HEADER_RING + header_slot[c] % HEADER_RING) * 64;
                header_slot[c] += 1;
                let rep = llc.core_write(addr, HEADER_BYTES as u64);
                let mem = rep.memory_bytes();
                if mem > 0 {
                    header_mem += mem;
                    sim.transfer(&Path::new().through(hw.arm_mem), mem, 0, Ev::Writeback);
                }
                match exp.mode {
                    TxMode::HeaderOnly => {
                        ops[op].parts = 2;
                        sim.transfer(
                            &paths.header,
                            HEADER_BYTES as u64,
                            hw.dma_pull_overhead(),
                            Ev::PartDone { op },
                        );
                        sim.transfer(
                            &paths.payload,
                            wire - HEADER_BYTES as u64,
                            hw.dma_pull_overhead(),
                            Ev::PartDone { op },
                        );
                    }
                    _ => {
                        ops[op].parts = 1;
                        sim.transfer(
                            &paths.send,
                            wire,
                            hw.dma_pull_overhead(),
                            Ev::PartDone { op },
                        );
                    }
                }
            }
            Ev::PartDone { op } => {
                ops[op].parts -= 1;
                if ops[op].parts == 0 {
                    done_bytes += exp.payload;
                    completed_ops += 1;
                    let sq = ops[op].sq;
                    free_ops.push(op);
                    sim.at(now, Ev::Issue { sq }).unwrap();
                }
            }
            Ev::RxArrive => {
                if rx_inflight < exp.rx_queue {
                    rx_inflight += 1;
                    sim.transfer(&rx_path, exp.rx_packet, hw.dma_push_overhead(), Ev::RxDone);
                } else {
                    rx_drops += 1;
                }
                sim.after(rx_gap.unwrap(), Ev::RxArrive);
            }
            Ev::RxDone => {
                rx_inflight -= 1;
                if now >= t_inject + exp.settle {
                    rx_bytes_after += exp.rx_packet;
                }
            }
            Ev::Sample => {
                res.series.push((now, done_bytes));
                sim.after(10 * US, Ev::Sample);
            }
            Ev::Writeback => {}
        }
    });
    snapshot_marks(&sim, &mut next_mark);

    let metered_per_op = match exp.mode {
        TxMode::HeaderOnly => wire - HEADER_BYTES as u64,
        _ => wire,
    } as f64;
    let ops_between = |a: usize, b: usize| (meter_at[b] - meter_at[a]) / metered_per_op;
    let gbps =
        |a: usize, b: usize| ops_between(a, b) * exp.payload as f64 * 8.0 / exp.window as f64;
    res.tx_gbps = gbps(0, 1);
    let ops_window = ops_between(0, 1).max(1e-9);
    res.arm_mem_bytes_per_op = (mem_at[1] - mem_at[0]) / ops_window;
    res.arm_up_bytes_per_op = (up_at[1] - up_at[0]) / ops_window;
    if exp.rx_gbps.is_some() {
        res.tx_gbps_with_rx = Some(gbps(2, 3));
        res.rx_gbps = Some(rx_bytes_after as f64 * 8.0 / exp.window as f64);
    }
    res.rx_drops = rx_drops;
    res.ops = completed_ops;
    res.header_llc_memory_bytes = header_mem;
    res
}

impl TxResult {
    /// Fractional throughput loss after the reverse flow started.
    pub fn drop_fraction(&self) -> Option<f64> {
        self.tx_gbps_with_rx.map(|after| 1.0 - after / self.tx_gbps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mode: TxMode, payload: u64) -> TxResult {
        let mut e = TxExperiment::new(mode, payload);
        e.window = 50 * US;
        run_tx(&e, &HardwareProfile::bf3(), 1)
    }

    #[test]
    fn header_only_keeps_payload_off_the_arm() {
        let r = quick(TxMode::HeaderOnly, 2048);
        assert!(r.tx_gbps > 350.0, "{r:?}");
        assert_eq!(r.arm_mem_bytes_per_op, 0.0);
        assert!(r.arm_up_bytes_per_op <= 64.0 + 1e-6);
    }

    #[test]
    fn dma_assist_charges_memory_twice() {
        let r = quick(TxMode::DmaAssist, 2048);
        assert!(r.arm_mem_bytes_per_op >= 2.0 * 2048.0, "{r:?}");
        assert!(r.arm_up_bytes_per_op >= 2048.0);
    }

    #[test]
    fn resolve_faults_outside_region() {
        let mut sqs = SqMap::new(2);
        let sq = sqs.create_sq(3);
        let mut t = ShadowTable::new();
        let r = t.register(3, 0x9000, 4096).unwrap();
        let mut item = TxWorkItem {
            sq_id: sq,
            opcode: TxOpcode::Write,
            arm_va: r.arm_va,
            length: 2048,
            remote_addr: 0,
            signaled: true,
        };
        assert_eq!(resolve(&item, &sqs, &t).unwrap(), 0x9000);
        item.length = 8192;
        assert!(matches!(
            resolve(&item, &sqs, &t),
            Err(TxError::Fault { .. })
        ));
    }

    #[test]
    fn wire_bytes_count_one_header_per_segment() {
        assert_eq!(wire_bytes(2048), 2112);
        assert_eq!(wire_bytes(8192), 8192 + 128);
        assert_eq!(wire_bytes(0), 64);
    }
}
