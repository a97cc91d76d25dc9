//! Host-to-Arm WQE submission: notification pipe vs doorbell vs WQE-by-MMIO.
//!
//! One host core produces 64 B WQEs and one Arm core consumes them.
//! - pipe: the host core spends `dma_setup_ns` per batch, the push lands one
//!   PCIe crossing later and the polling consumer sees it immediately.
//! - doorbell: a posted doorbell write crosses PCIe, then the Arm core fetches
//!   the WQE with a pulled DMA and waits for it (one fetch per doorbell).
//! - mmio: each WQE is one write through the rate-limited MMIO window.

use std::collections::VecDeque;

use serde::Serialize;

use crate::sim::{Hardware, HardwareProfile, MmioPort, Nanos, Path, Sim};

use super::{DmaPipe, PipeDma, PipeElement, PipeError, DEFAULT_COUNTER_PERIOD, ELEMENT_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    DmaPipe,
    Doorbell,
    Mmio,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::DmaPipe, Mechanism::Doorbell, Mechanism::Mmio];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::DmaPipe => "dma_pipe",
            Mechanism::Doorbell => "doorbell",
            Mechanism::Mmio => "mmio",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NotifyResult {
    pub mechanism: Mechanism,
    pub ops: u64,
    /// Submission-to-receipt time of a WQE on an idle system.
    pub latency_ns: Nanos,
    pub elapsed_ns: Nanos,
    pub throughput_mops: f64,
    pub dmas: u64,
    pub counter_reads: u64,
}

enum Ev {
    HostIssue,
    PipeLanded(PipeDma),
    DoorbellArrive(u64),
    Fetched,
}

struct Bench {
    hw: Hardware,
    mech: Mechanism,
    batch: usize,
    ops: u64,
    issued: u64,
    received: u64,
    pipe: DmaPipe,
    counter_reads: u64,
    dmas: u64,
    doorbells: VecDeque<u64>,
    arm_busy: bool,
    mmio: MmioPort,
    first_receipt: Option<Nanos>,
    last_receipt: Nanos,
}

impl Bench {
    fn wqe(seq: u64) -> PipeElement {
        PipeElement::raw(&seq.to_le_bytes())
    }

    fn handle(&mut self, sim: &mut Sim<Ev>, ev: Ev) -> Result<(), PipeError> {
        let p = self.hw.profile.clone();
        let push = Path::new()
            .through(self.hw.host.up)
            .through(self.hw.arm.down);
        match ev {
            Ev::HostIssue => {
                if self.issued >= self.ops {
                    return Ok(());
                }
                match self.mech {
                    Mechanism::DmaPipe => {
                        let n = (self.ops - self.issued).min(self.batch as u64);
                        let batch: Vec<_> = (self.issued..self.issued + n).map(Self::wqe).collect();
                        let before = self.pipe.producer().counter_reads();
                        let dma = match self.pipe.produce_blocking(&batch) {
                            Err(PipeError::Full { .. }) => {
                                // consumer behind; poll again after one counter read
                                sim.after(self.hw.dma_pull_overhead(), Ev::HostIssue);
                                return Ok(());
                            }
                            r => r?,
                        };
                        self.counter_reads += self.pipe.producer().counter_reads() - before;
                        self.dmas += 1;
                        self.issued += n;
                        sim.after(p.dma_setup_ns, Ev::HostIssue);
                        self.start_push(sim, &push, dma);
                    }
                    Mechanism::Doorbell => {
                        let seq = self.issued;
                        self.issued += 1;
                        sim.after(p.pcie_one_way_ns, Ev::DoorbellArrive(seq));
                        if self.issued < self.ops {
                            sim.after(0, Ev::HostIssue);
                        }
                    }
                    Mechanism::Mmio => {
                        for _ in self.issued..self.ops {
                            let t = self.mmio.write(sim.now(), ELEMENT_BYTES);
                            self.record(t);
                        }
                        self.issued = self.ops;
                    }
                }
            }
            Ev::PipeLanded(dma) => {
                self.pipe.complete(&dma);
                while let Some(e) = self.pipe.consume() {
                    debug_assert_eq!(e.body[..8], self.received.to_le_bytes());
                    self.record(sim.now());
                }
            }
            Ev::DoorbellArrive(seq) => {
                self.doorbells.push_back(seq);
                self.fetch_next(sim);
            }
            Ev::Fetched => {
                self.record(sim.now());
                self.arm_busy = false;
                self.fetch_next(sim);
            }
        }
        Ok(())
    }

    fn start_push(&mut self, sim: &mut Sim<Ev>, push: &Path, dma: PipeDma) {
        let p = &self.hw.profile;
        let bytes = dma.bytes();
        // the transfer begins once the host finishes setting it up
        let lat = p.dma_setup_ns + p.pcie_one_way_ns;
        sim.transfer(push, bytes, lat, Ev::PipeLanded(dma));
    }

    fn fetch_next(&mut self, sim: &mut Sim<Ev>) {
        if self.arm_busy {
            return;
        }
        if self.doorbells.pop_front().is_none() {
            return;
        }
        self.arm_busy = true;
        self.dmas += 1;
        let pull = Path::new()
            .through(self.hw.host.up)
            .through(self.hw.arm.down);
        sim.transfer(
            &pull,
            ELEMENT_BYTES as u64,
            self.hw.dma_pull_overhead(),
            Ev::Fetched,
        );
    }

    fn record(&mut self, t: Nanos) {
        self.received += 1;
        self.first_receipt.get_or_insert(t);
        self.last_receipt = self.last_receipt.max(t);
    }
}

fn run(
    profile: &HardwareProfile,
    mech: Mechanism,
    ops: u64,
    batch: usize,
) -> Result<NotifyResult, PipeError> {
    let mut sim: Sim<Ev> = Sim::new(0);
    let hw = Hardware::build(profile.clone(), sim.fabric_mut(), 1);
    let mut b = Bench {
        mmio: MmioPort::new(profile),
        hw,
        mech,
        batch: batch.max(1),
        ops,
        issued: 0,
        received: 0,
        pipe: DmaPipe::new(256, DEFAULT_COUNTER_PERIOD)?,
        counter_reads: 0,
        dmas: 0,
        doorbells: VecDeque::new(),
        arm_busy: false,
        first_receipt: None,
        last_receipt: 0,
    };
    sim.after(0, Ev::HostIssue);
    while let Some(ev) = sim.next_event(Nanos::MAX) {
        b.handle(&mut sim, ev)?;
    }
    assert_eq!(b.received, ops, "every WQE reaches the Arm");
    Ok(NotifyResult {
        mechanism: mech,
        ops,
        latency_ns: b.first_receipt.unwrap_or(0),
        elapsed_ns: b.last_receipt,
        // receipt rate between the first and last WQE
        throughput_mops: match b.first_receipt {
            Some(f) if ops > 1 && b.last_receipt > f => {
                (ops - 1) as f64 / (b.last_receipt - f) as f64 * 1e3
            }
            _ => 0.0,
        },
        dmas: b.dmas,
        counter_reads: b.counter_reads,
    })
}

/// Unloaded latency of one WQE, then saturated throughput over `ops` WQEs.
/// The pipe producer batches up to `batch` elements per DMA.
pub fn notify_bench(
    profile: &HardwareProfile,
    mech: Mechanism,
    ops: u64,
    batch: usize,
) -> Result<NotifyResult, PipeError> {
    let single = run(profile, mech, 1, 1)?;
    let mut r = run(profile, mech, ops.max(1), batch)?;
    r.latency_ns = single.latency_ns;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doorbell_pays_one_extra_pcie_round_trip() {
        let p = HardwareProfile::bf3();
        let pipe = notify_bench(&p, Mechanism::DmaPipe, 1000, 1).unwrap();
        let db = notify_bench(&p, Mechanism::Doorbell, 1000, 1).unwrap();
        assert_eq!(db.latency_ns - pipe.latency_ns, 2 * p.pcie_one_way_ns);
        assert!(
            pipe.throughput_mops >= 2.0 * db.throughput_mops,
            "{pipe:?} {db:?}"
        );
    }

    #[test]
    fn counter_reads_once_per_period() {
        let r = notify_bench(&HardwareProfile::bf3(), Mechanism::DmaPipe, 10_000, 1).unwrap();
        assert_eq!(r.counter_reads, 10_000u64.div_ceil(DEFAULT_COUNTER_PERIOD));
        assert_eq!(r.dmas, 10_000);
    }

    #[test]
    fn mmio_is_capped_by_window_rate() {
        let p = HardwareProfile::bf3();
        let r = notify_bench(&p, Mechanism::Mmio, 50, 1).unwrap();
        assert!(r.throughput_mops * 1e6 <= p.mmio_rate_per_s * 1.05, "{r:?}");
        assert_eq!(r.latency_ns, p.pcie_one_way_ns);
    }
}
