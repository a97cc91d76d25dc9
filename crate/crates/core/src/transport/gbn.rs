//! Go-back-N sender and receiver state machines.
//!
//! The receiver accepts only the expected PSN, acknowledges every accepted
//! packet cumulatively, re-acknowledges duplicates and sends one NAK per
//! gap. The sender retires on cumulative acks, and on a NAK or timer expiry
//! rewinds to the oldest unacknowledged packet and resends the whole
//! window in order before any new data.

use std::collections::VecDeque;

use super::link::{ReliableReceiver, ReliableSender, RxOutcome};
use super::packet::{segment, spray_port, Opcode, Packet, DEFAULT_MTU, FLAG_ECN};
use crate::sim::{Nanos, US};

#[derive(Debug, Clone, Copy)]
pub struct GbnConfig {
    pub mtu: u32,
    pub max_outstanding: usize,
    pub rto_min: Nanos,
    pub rto_srtt_mult: f64,
}

impl Default for GbnConfig {
    fn default() -> Self {
        GbnConfig {
            mtu: DEFAULT_MTU,
            max_outstanding: 64,
            rto_min: 10 * US,
            rto_srtt_mult: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    pkt: Packet,
    first_tx: Nanos,
    retransmitted: bool,
}

#[derive(Debug, Clone)]
pub struct GbnSender {
    cfg: GbnConfig,
    qp_id: u32,
    next_psn: u32,
    pending: VecDeque<Packet>,
    window: VecDeque<InFlight>,
    resend: usize,
    srtt: Option<f64>,
    timer: Option<Nanos>,
    spray: Option<(u16, u16)>,
    retransmissions: u64,
    timeouts: u64,
    sent: u64,
    watermark: Option<u32>,
}

impl GbnSender {
    pub fn new(qp_id: u32, first_psn: u32, cfg: GbnConfig) -> Self {
        assert!(cfg.max_outstanding > 0);
        GbnSender {
            cfg,
            qp_id,
            next_psn: first_psn,
            pending: VecDeque::new(),
            window: VecDeque::new(),
            resend: 0,
            srtt: None,
            timer: None,
            spray: None,
            retransmissions: 0,
            timeouts: 0,
            sent: 0,
            watermark: None,
        }
    }

    /// Spread sprayable opcodes over `paths` source ports starting at `base`.
    pub fn enable_spray(&mut self, base: u16, paths: u16) {
        self.spray = Some((base, paths));
    }

    pub fn next_psn(&self) -> u32 {
        self.next_psn
    }

    /// Segments and queues a message; returns the PSN range used.
    pub fn enqueue(
        &mut self,
        opcode: Opcode,
        payload: &[u8],
        remote_addr: u64,
    ) -> std::ops::Range<u32> {
        let pkts = segment(
            opcode,
            self.qp_id,
            self.next_psn,
            payload,
            remote_addr,
            self.cfg.mtu,
        );
        self.push_packets(pkts)
    }

    /// Queues a READ request for `len` bytes (one packet, no payload).
    pub fn enqueue_read(&mut self, remote_addr: u64, len: u32) -> std::ops::Range<u32> {
        let mut p = Packet::control(Opcode::ReadRequest, self.qp_id, self.next_psn);
        p.remote_addr = remote_addr;
        p.msg_len = len;
        self.push_packets(vec![p])
    }

    /// Queues already-built packets, renumbering PSNs consecutively.
    pub fn push_packets(&mut self, pkts: Vec<Packet>) -> std::ops::Range<u32> {
        let start = self.next_psn;
        for mut p in pkts {
            p.psn = self.next_psn;
            p.qp_id = self.qp_id;
            self.next_psn = self.next_psn.checked_add(1).expect("psn space exhausted");
            self.pending.push_back(p);
        }
        start..self.next_psn
    }

    pub fn window_psns(&self) -> Vec<u32> {
        self.window.iter().map(|f| f.pkt.psn).collect()
    }

    pub fn outstanding(&self) -> usize {
        self.window.len()
    }

    pub fn srtt(&self) -> Option<f64> {
        self.srtt
    }

    pub fn timeouts(&self) -> u64 {
        self.timeouts
    }

    pub fn packets_sent(&self) -> u64 {
        self.sent
    }

    pub fn watermark(&self) -> Option<u32> {
        self.watermark
    }

    pub fn rto(&self) -> Nanos {
        let from_srtt = self
            .srtt
            .map_or(0, |s| (s * self.cfg.rto_srtt_mult).ceil() as Nanos);
        from_srtt.max(self.cfg.rto_min)
    }

    fn retire_through(&mut self, psn: u32, now: Nanos) -> usize {
        let mut n = 0;
        while let Some(f) = self.window.front() {
            if f.pkt.psn > psn {
                break;
            }
            let f = self.window.pop_front().unwrap();
            if f.pkt.psn == psn && !f.retransmitted {
                let sample = (now - f.first_tx) as f64;
                self.srtt = Some(match self.srtt {
                    None => sample,
                    Some(s) => 0.875 * s + 0.125 * sample,
                });
            }
            n += 1;
        }
        if n > 0 {
            self.resend = self.resend.saturating_sub(n);
            self.watermark = Some(psn);
            self.timer = if self.window.is_empty() {
                None
            } else {
                Some(now + self.rto())
            };
        }
        n
    }

    fn stale(&self, psn: u32) -> bool {
        self.window.front().is_none_or(|f| psn < f.pkt.psn)
    }

    pub fn on_ack(&mut self, acked: u32, now: Nanos) {
        if self.stale(acked) {
            return;
        }
        self.retire_through(acked, now);
    }

    pub fn on_nak(&mut self, expected: u32, now: Nanos) {
        if self.stale(expected) {
            return;
        }
        if expected > 0 {
            self.retire_through(expected - 1, now);
        }
        if self.window.front().is_some_and(|f| f.pkt.psn == expected) {
            self.resend = 0;
            self.timer = Some(now + self.rto());
        }
    }
}

impl ReliableSender for GbnSender {
    fn poll_transmit(&mut self, now: Nanos) -> Option<Packet> {
        let mut pkt = if self.resend < self.window.len() {
            let f = &mut self.window[self.resend];
            f.retransmitted = true;
            self.resend += 1;
            self.retransmissions += 1;
            f.pkt.clone()
        } else if self.window.len() < self.cfg.max_outstanding {
            let p = self.pending.pop_front()?;
            self.window.push_back(InFlight {
                pkt: p.clone(),
                first_tx: now,
                retransmitted: false,
            });
            self.resend = self.window.len();
            if self.timer.is_none() {
                self.timer = Some(now + self.rto());
            }
            p
        } else {
            return None;
        };
        if let Some((base, k)) = self.spray {
            if pkt.opcode.sprayable() {
                pkt.udp_src_port = spray_port(base, pkt.psn, k);
            }
        }
        self.sent += 1;
        Some(pkt)
    }

    fn on_feedback(&mut self, fb: &Packet, now: Nanos) {
        match fb.opcode {
            Opcode::Ack => self.on_ack(fb.psn, now),
            Opcode::Nak => self.on_nak(fb.psn, now),
            _ => {}
        }
    }

    fn timer(&self) -> Option<Nanos> {
        self.timer
    }

    fn on_timer(&mut self, now: Nanos) {
        match self.timer {
            Some(t) if t <= now && !self.window.is_empty() => {
                self.timeouts += 1;
                self.resend = 0;
                self.timer = Some(now + self.rto());
            }
            _ => {}
        }
    }

    fn idle(&self) -> bool {
        self.pending.is_empty() && self.window.is_empty()
    }

    fn retransmissions(&self) -> u64 {
        self.retransmissions
    }
}

#[derive(Debug, Clone)]
pub struct GbnReceiver {
    qp_id: u32,
    expected: u32,
    nak_outstanding: bool,
    duplicates: u64,
    out_of_order: u64,
}

impl GbnReceiver {
    pub fn new(qp_id: u32, first_psn: u32) -> Self {
        GbnReceiver {
            qp_id,
            expected: first_psn,
            nak_outstanding: false,
            duplicates: 0,
            out_of_order: 0,
        }
    }

    pub fn expected(&self) -> u32 {
        self.expected
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn out_of_order(&self) -> u64 {
        self.out_of_order
    }

    fn feedback(&self, opcode: Opcode, psn: u32, ecn: bool) -> Packet {
        let mut p = Packet::control(opcode, self.qp_id, psn);
        if ecn {
            p.flags |= FLAG_ECN;
        }
        p
    }
}

impl ReliableReceiver for GbnReceiver {
    fn on_packet(&mut self, pkt: &Packet, _now: Nanos) -> RxOutcome {
        if pkt.psn == self.expected {
            self.expected += 1;
            self.nak_outstanding = false;
            RxOutcome {
                accepted: true,
                feedback: Some(self.feedback(Opcode::Ack, pkt.psn, pkt.ecn())),
            }
        } else if pkt.psn < self.expected {
            self.duplicates += 1;
            RxOutcome {
                accepted: false,
                feedback: Some(self.feedback(Opcode::Ack, self.expected - 1, pkt.ecn())),
            }
        } else {
            self.out_of_order += 1;
            if self.nak_outstanding {
                return RxOutcome {
                    accepted: false,
                    feedback: None,
                };
            }
            self.nak_outstanding = true;
            RxOutcome {
                accepted: false,
                feedback: Some(self.feedback(Opcode::Nak, self.expected, pkt.ecn())),
            }
        }
    }
}
