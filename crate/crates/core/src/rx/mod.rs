//! In-cache RX path: per-core queues of line-aligned buffers driven through
//! arrive, process, deliver and invalidate stages, plus the two naive
//! baselines that stage payloads in Arm memory.

pub mod queue;

use std::collections::VecDeque;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cache::{CacheError, CacheGeometry, Llc};
use crate::sim::fabric::Path;
use crate::sim::{Hardware, HardwareProfile, Nanos, ProcessDist, Sim, US};
use crate::stats::{Samples, Summary};
use crate::transport::packet::{Opcode, Packet, HEADER_BYTES};

pub use queue::{Delivered, Processed, RxQueue, RxStageToken};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RxError {
    #[error("no free buffer on core {0}")]
    NoBuffer(usize),
    #[error("packet of {bytes} B exceeds {element} B element")]
    TooLarge { bytes: u64, element: u64 },
    #[error("buffer {buffer} is in stage {found}, expected {expected}")]
    Stage {
        buffer: usize,
        expected: u8,
        found: u8,
    },
    #[error("core {core}: no valid host destination for {len} B at {addr:#x}")]
    Fault { core: usize, addr: u64, len: u64 },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RxMode {
    SelfInvalidate,
    NaiveDma,
    NaiveRdma,
}

impl RxMode {
    pub const ALL: [RxMode; 3] = [RxMode::SelfInvalidate, RxMode::NaiveDma, RxMode::NaiveRdma];

    pub fn name(self) -> &'static str {
        match self {
            RxMode::SelfInvalidate => "self_invalidate",
            RxMode::NaiveDma => "naive_dma",
            RxMode::NaiveRdma => "naive_rdma",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Processing slowdown over `[start, end)`.
#[derive(Debug, Clone, Copy)]
pub struct Stall {
    pub start: Nanos,
    pub end: Nanos,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct RxExperiment {
    pub mode: RxMode,
    /// Defaults to the profile's data cores.
    pub cores: Option<usize>,
    pub element_count: usize,
    /// Buffer size; packets fill a whole element including the header.
    pub element_bytes: u64,
    /// Defaults to the endpoint rate.
    pub offered_gbps: Option<f64>,
    pub poisson: bool,
    pub warmup: Nanos,
    pub window: Nanos,
    pub nic_queue: usize,
    /// Whether the naive modes get DDIO (self-invalidate always follows the profile).
    pub naive_ddio: bool,
    pub stall: Option<Stall>,
    pub sample: Nanos,
}

impl RxExperiment {
    pub fn new(mode: RxMode, element_count: usize) -> Self {
        RxExperiment {
            mode,
            cores: None,
            element_count,
            element_bytes: 8192,
            offered_gbps: None,
            poisson: false,
            warmup: 100 * US,
            window: 400 * US,
            nic_queue: 256,
            naive_ddio: false,
            stall: None,
            sample: 10 * US,
        }
    }

    pub fn working_set_bytes(&self, profile: &HardwareProfile) -> u64 {
        self.cores(profile) as u64 * self.element_count as u64 * self.element_bytes
    }

    fn cores(&self, profile: &HardwareProfile) -> usize {
        self.cores.unwrap_or(profile.data_core_count as usize)
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RxSample {
    pub t_ns: Nanos,
    pub delivered_bytes: u64,
    pub arm_mem_bytes: f64,
    pub evictions: u64,
    pub resident_bytes: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RxResult {
    pub mode: String,
    pub cores: usize,
    pub element_count: usize,
    pub working_set_bytes: u64,
    pub offered_gbps: f64,
    pub delivered_gbps: f64,
    pub arm_mem_gbps: f64,
    pub mem_bytes_per_packet: f64,
    pub packets: u64,
    pub drops: u64,
    pub faults: u64,
    pub evictions: u64,
    pub mean_resident_bytes: f64,
    pub max_resident_bytes: u64,
    /// Per-stage latency: NIC queue + placement, processing, host DMA, invalidate.
    pub stage_ns: [Summary; 4],
    /// Packets whose ACK left after their payload reached the host.
    pub ack_after_deliver: u64,
    #[serde(skip)]
    pub series: Vec<RxSample>,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Arrive,
    PlacedPart { core: usize, buf: usize },
    Processed { core: usize, buf: usize },
    Launch { core: usize, buf: usize },
    DeliveredPart { core: usize, buf: usize },
    Freed { core: usize, buf: usize },
    Mark(usize),
    Sample,
    Ignore,
}

#[derive(Default)]
struct Slot {
    token: Option<RxStageToken>,
    parts: u8,
    bytes: u64,
    t_arrive: Nanos,
    t_placed: Nanos,
    t_ack: Nanos,
    t_delivered: Nanos,
}

struct Resident {
    bytes: u64,
    max: u64,
    area: f64,
    last: Nanos,
    from: Nanos,
    to: Nanos,
}

impl Resident {
    fn change(&mut self, now: Nanos, delta: i64) {
        let a = self.last.max(self.from);
        let b = now.min(self.to);
        if b > a {
            self.area += self.bytes as f64 * (b - a) as f64;
        }
        self.last = now;
        self.bytes = (self.bytes as i64 + delta) as u64;
        if now >= self.from && now < self.to {
            self.max = self.max.max(self.bytes);
        }
    }
}

const HOST_BASE: u64 = 0x10_0000_0000;

pub fn run_rx(
    exp: &RxExperiment,
    profile: &HardwareProfile,
    seed: u64,
) -> Result<RxResult, RxError> {
    let cores = exp.cores(profile);
    if cores == 0 || exp.element_count == 0 || exp.window == 0 {
        return Err(RxError::Config(
            "cores, element_count and window must be positive".into(),
        ));
    }
    let mut sim: Sim<Ev> = Sim::new(seed);
    let hw = Hardware::build(profile.clone(), sim.fabric_mut(), 1);
    let geom = CacheGeometry::from_profile(profile)?;
    let ddio = if exp.mode == RxMode::SelfInvalidate {
        profile.ddio
    } else {
        exp.naive_ddio
    };
    let mut llc = Llc::new(geom).with_ddio(ddio);
    let line = profile.cacheline_bytes as u64;

    let mut queues = Vec::with_capacity(cores);
    let stride = exp.element_bytes.div_ceil(line) * line;
    // buffer i of every core sits side by side, so the buffers in use at
    // any moment are contiguous instead of aliasing into the same sets
    for c in 0..cores {
        let base = 0x1_0000_0000 + c as u64 * stride;
        let mut q = RxQueue::new(
            c,
            exp.mode,
            exp.element_bytes,
            exp.element_count,
            base,
            line,
        )?
        .with_pitch(stride * cores as u64)?;
        q.allow_region(HOST_BASE, u64::MAX / 2);
        queues.push(q);
    }
    let mut slots: Vec<Vec<Slot>> = (0..cores)
        .map(|_| (0..exp.element_count).map(|_| Slot::default()).collect())
        .collect();
    let mut waiting: Vec<VecDeque<(Packet, Nanos)>> = vec![VecDeque::new(); cores];
    let mut waiting_total = 0usize;
    let mut core_free = vec![0 as Nanos; cores];
    let mut next_psn = vec![0u32; cores];

    let place_path = Path::new().through(hw.wire[0].up).through(hw.arm.down);
    let ack_path = Path::new().through(hw.arm.up).through(hw.wire[0].down);
    let mem_path = Path::new().through(hw.arm_mem);
    let (deliver_path, deliver_latency) = match exp.mode {
        RxMode::SelfInvalidate | RxMode::NaiveDma => (
            Path::new().through(hw.arm.up).through(hw.host.down),
            hw.dma_push_overhead(),
        ),
        // Intra-node RDMA loops through the Arm's NIC function: twice the endpoint usage.
        RxMode::NaiveRdma => (
            Path::new().weighted(hw.arm.up, 2.0).through(hw.host.down),
            hw.dma_pull_overhead(),
        ),
    };

    let offered = exp.offered_gbps.unwrap_or(profile.endpoint_rate_gbps);
    let gap = exp.element_bytes as f64 * 8.0 / offered;
    let payload = (exp.element_bytes - HEADER_BYTES as u64) as u16;
    let t0 = exp.warmup;
    let t1 = exp.warmup + exp.window;

    let mut resident = Resident {
        bytes: 0,
        max: 0,
        area: 0.0,
        last: 0,
        from: t0,
        to: t1,
    };
    let mut res = RxResult {
        mode: exp.mode.name().into(),
        cores,
        element_count: exp.element_count,
        working_set_bytes: exp.working_set_bytes(profile),
        offered_gbps: offered,
        ..Default::default()
    };
    let mut stage_samples: [Samples; 4] = Default::default();
    let mut delivered_total = 0u64;
    let mut delivered_window = 0u64;
    let mut packets_window = 0u64;
    let mut mem_mark = [0f64; 2];
    let mut evict_mark = [0u64; 2];
    let mut arrivals = 0u64;
    let mut next_arrival = 0f64;
    let mut error: Option<RxError> = None;

    sim.at(0, Ev::Arrive).unwrap();
    sim.at(0, Ev::Sample).unwrap();
    sim.at(t0, Ev::Mark(0)).unwrap();
    sim.at(t1, Ev::Mark(1)).unwrap();

    let evictions = |llc: &Llc| {
        let t = llc.totals();
        t.evictions_clean + t.evictions_dirty
    };

    sim.run_until(t1 + 1, |sim, ev| {
        if error.is_some() {
            return;
        }
        let now = sim.now();
        let mut place = |sim: &mut Sim<Ev>,
                         queues: &mut Vec<RxQueue>,
                         slots: &mut Vec<Vec<Slot>>,
                         llc: &mut Llc,
                         core: usize,
                         pkt: Packet,
                         t_arrive: Nanos|
         -> Result<(), RxError> {
            let (token, rep) = queues[core].rx_arrive(&pkt, llc)?;
            let buf = token.buffer_id();
            let mem = rep.memory_bytes();
            let bytes = pkt.wire_bytes();
            slots[core][buf] = Slot {
                token: Some(token),
                parts: 1 + (mem > 0) as u8,
                bytes,
                t_arrive,
                ..Default::default()
            };
            sim.transfer(
                &place_path,
                bytes,
                hw.dma_push_overhead(),
                Ev::PlacedPart { core, buf },
            );
            if mem > 0 {
                sim.transfer(&mem_path, mem, 0, Ev::PlacedPart { core, buf });
            }
            Ok(())
        };
        let step = (|| -> Result<(), RxError> {
            match ev {
                Ev::Arrive => {
                    let core = (arrivals % cores as u64) as usize;
                    arrivals += 1;
                    let mut pkt = Packet::control(Opcode::Write, core as u32, next_psn[core]);
                    next_psn[core] += 1;
                    pkt.length = payload;
                    pkt.remote_addr = HOST_BASE + (arrivals % 4096) * exp.element_bytes;
                    if queues[core].free_buffers() > 0 {
                        place(sim, &mut queues, &mut slots, &mut llc, core, pkt, now)?;
                    } else if waiting_total < exp.nic_queue {
                        waiting[core].push_back((pkt, now));
                        waiting_total += 1;
                    } else {
                        res.drops += 1;
                        // the sender would retransmit; keep the PSN stream gap-free here
                        next_psn[core] -= 1;
                    }
                    next_arrival += if exp.poisson {
                        let u: f64 = sim.rng.gen_range(f64::EPSILON..1.0);
                        -u.ln() * gap
                    } else {
                        gap
                    };
                    sim.at((next_arrival.round() as Nanos).max(now), Ev::Arrive)
                        .unwrap();
                }
                Ev::PlacedPart { core, buf } => {
                    let s = &mut slots[core][buf];
                    s.parts -= 1;
                    if s.parts == 0 {
                        s.t_placed = now;
                        resident.change(now, s.bytes as i64);
                        let mut proc = match profile.process_dist {
                            ProcessDist::Deterministic => profile.rx_process_ns as f64,
                            ProcessDist::Exponential => {
                                let u: f64 = sim.rng.gen_range(f64::EPSILON..1.0);
                                -u.ln() * profile.rx_process_ns as f64
                            }
                        };
                        let start = now.max(core_free[core]);
                        if let Some(st) = exp.stall {
                            if start >= st.start && start < st.end {
                                proc *= st.factor;
                            }
                        }
                        let done = start + proc.round() as Nanos;
                        core_free[core] = done + profile.dma_setup_ns;
                        sim.at(done, Ev::Processed { core, buf }).unwrap();
                    }
                }
                Ev::Processed { core, buf } => {
                    let token = slots[core][buf].token.take().expect("token in stage 2");
                    let p = queues[core].rx_process(token, &mut llc, now)?;
                    let mem = p.report.memory_bytes();
                    if mem > 0 {
                        sim.transfer(&mem_path, mem, 0, Ev::Ignore);
                    }
                    if p.feedback.is_some() {
                        sim.transfer(
                            &ack_path,
                            HEADER_BYTES as u64,
                            hw.dma_pull_overhead(),
                            Ev::Ignore,
                        );
                    }
                    slots[core][buf].t_ack = now;
                    match p.token {
                        Some(t) => {
                            slots[core][buf].token = Some(t);
                            sim.at(now + profile.dma_setup_ns, Ev::Launch { core, buf })
                                .unwrap();
                        }
                        None => {
                            resident.change(now, -(slots[core][buf].bytes as i64));
                            refill(
                                sim,
                                &mut queues,
                                &mut slots,
                                &mut llc,
                                &mut waiting,
                                &mut waiting_total,
                                core,
                                &mut place,
                            )?;
                        }
                    }
                }
                Ev::Launch { core, buf } => {
                    let token = slots[core][buf].token.take().expect("token in stage 3");
                    match queues[core].rx_deliver(token, &mut llc) {
                        Ok(d) => {
                            let mem = d.report.memory_bytes();
                            slots[core][buf].token = Some(d.token);
                            slots[core][buf].parts = 1 + (mem > 0) as u8;
                            sim.transfer(
                                &deliver_path,
                                d.len,
                                deliver_latency,
                                Ev::DeliveredPart { core, buf },
                            );
                            if mem > 0 {
                                sim.transfer(&mem_path, mem, 0, Ev::DeliveredPart { core, buf });
                            }
                        }
                        Err(RxError::Fault { .. }) => {
                            res.faults += 1;
                            resident.change(now, -(slots[core][buf].bytes as i64));
                            refill(
                                sim,
                                &mut queues,
                                &mut slots,
                                &mut llc,
                                &mut waiting,
                                &mut waiting_total,
                                core,
                                &mut place,
                            )?;
                        }
                        Err(e) => return Err(e),
                    }
                }
                Ev::DeliveredPart { core, buf } => {
                    let s = &mut slots[core][buf];
                    s.parts -= 1;
                    if s.parts == 0 {
                        s.t_delivered = now;
                        let len = s.bytes - HEADER_BYTES as u64;
                        delivered_total += len;
                        if now > t0 && now <= t1 {
                            delivered_window += len;
                            packets_window += 1;
                        }
                        if s.t_ack > now {
                            res.ack_after_deliver += 1;
                        }
                        let cost = if exp.mode == RxMode::SelfInvalidate {
                            profile.invalidate_call_ns
                        } else {
                            0
                        };
                        let start = now.max(core_free[core]);
                        core_free[core] = start + cost;
                        sim.at(core_free[core], Ev::Freed { core, buf }).unwrap();
                    }
                }
                Ev::Freed { core, buf } => {
                    let token = slots[core][buf].token.take().expect("token in stage 4");
                    queues[core].rx_invalidate(token, &mut llc)?;
                    let s = &slots[core][buf];
                    resident.change(now, -(s.bytes as i64));
                    if now > t0 && now <= t1 {
                        stage_samples[0].push(s.t_placed - s.t_arrive);
                        stage_samples[1].push(s.t_ack - s.t_placed);
                        stage_samples[2].push(s.t_delivered - s.t_ack);
                        stage_samples[3].push(now - s.t_delivered);
                    }
                    refill(
                        sim,
                        &mut queues,
                        &mut slots,
                        &mut llc,
                        &mut waiting,
                        &mut waiting_total,
                        core,
                        &mut place,
                    )?;
                }
                Ev::Mark(i) => {
                    mem_mark[i] = sim.fabric().resource(hw.arm_mem).bytes_moved();
                    evict_mark[i] = evictions(&llc);
                }
                Ev::Sample => {
                    res.series.push(RxSample {
                        t_ns: now,
                        delivered_bytes: delivered_total,
                        arm_mem_bytes: sim.fabric().resource(hw.arm_mem).bytes_moved(),
                        evictions: evictions(&llc),
                        resident_bytes: resident.bytes,
                    });
                    sim.after(exp.sample, Ev::Sample);
                }
                Ev::Ignore => {}
            }
            Ok(())
        })();
        if let Err(e) = step {
            error = Some(e);
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    resident.change(t1, 0);

    let secs_ns = exp.window as f64;
    res.delivered_gbps = delivered_window as f64 * 8.0 / secs_ns;
    res.arm_mem_gbps = (mem_mark[1] - mem_mark[0]) * 8.0 / secs_ns;
    res.packets = packets_window;
    res.mem_bytes_per_packet = if packets_window > 0 {
        (mem_mark[1] - mem_mark[0]) / packets_window as f64
    } else {
        0.0
    };
    res.evictions = evict_mark[1] - evict_mark[0];
    res.mean_resident_bytes = resident.area / secs_ns;
    res.max_resident_bytes = resident.max;
    res.stage_ns = [0, 1, 2, 3].map(|i| stage_samples[i].summary());
    Ok(res)
}

/// Moves the next NIC-queued packet for `core` into the buffer just freed.
#[allow(clippy::too_many_arguments)]
fn refill<F>(
    sim: &mut Sim<Ev>,
    queues: &mut Vec<RxQueue>,
    slots: &mut Vec<Vec<Slot>>,
    llc: &mut Llc,
    waiting: &mut [VecDeque<(Packet, Nanos)>],
    waiting_total: &mut usize,
    core: usize,
    place: &mut F,
) -> Result<(), RxError>
where
    F: FnMut(
        &mut Sim<Ev>,
        &mut Vec<RxQueue>,
        &mut Vec<Vec<Slot>>,
        &mut Llc,
        usize,
        Packet,
        Nanos,
    ) -> Result<(), RxError>,
{
    if let Some((pkt, t)) = waiting[core].pop_front() {
        *waiting_total -= 1;
        place(sim, queues, slots, llc, core, pkt, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mode: RxMode, elements: usize) -> RxResult {
        let mut e = RxExperiment::new(mode, elements);
        e.warmup = 1000 * US;
        e.window = 200 * US;
        run_rx(&e, &HardwareProfile::bf3(), 1).unwrap()
    }

    #[test]
    fn self_invalidate_runs_at_line_rate_without_memory() {
        let r = quick(RxMode::SelfInvalidate, 512);
        assert_eq!(r.working_set_bytes, 48 << 20);
        assert!(r.delivered_gbps > 380.0, "{r:?}");
        assert_eq!(r.arm_mem_gbps, 0.0);
        assert_eq!(r.drops, 0);
        assert_eq!(r.ack_after_deliver, 0);
    }

    #[test]
    fn naive_modes_are_memory_or_endpoint_bound() {
        let dma = quick(RxMode::NaiveDma, 64);
        let rdma = quick(RxMode::NaiveRdma, 64);
        assert!(dma.delivered_gbps < 260.0, "{dma:?}");
        assert!(rdma.delivered_gbps < dma.delivered_gbps, "{rdma:?}");
        assert!(dma.mem_bytes_per_packet > 8000.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RxMode::ALL {
            assert_eq!(RxMode::parse(m.name()), Some(m));
        }
    }

    #[test]
    fn resident_bytes_follow_littles_law() {
        let mut p = HardwareProfile::bf3();
        p.data_core_count = 128;
        p.arm_core_count = 132;
        p.rx_process_ns = 10_000;
        let mut e = RxExperiment::new(RxMode::SelfInvalidate, 16);
        e.warmup = 100 * US;
        e.window = 400 * US;
        let r = run_rx(&e, &p, 3).unwrap();
        let sojourn: f64 = r.stage_ns[1..].iter().map(|s| s.mean).sum();
        let little = r.delivered_gbps / 8.0 * sojourn * 8192.0 / 8128.0;
        assert!((r.mean_resident_bytes / little - 1.0).abs() < 0.02);
        assert_eq!(r.arm_mem_gbps, 0.0);
    }
}
