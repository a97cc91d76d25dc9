//! Point-to-point reliable-delivery harness.
//!
//! Runs one sender and one receiver over a serializing data channel with
//! fault injection and a reliable feedback channel. Optional DCQCN pacing
//! marks data packets whenever the sender rate plus background load
//! exceeds the marking threshold of the bottleneck.

use std::collections::{BTreeMap, HashMap};

use super::cc::{CcParams, CongestionControl, Dcqcn};
use super::faults::{FaultAction, FaultPlan};
use super::packet::{Packet, FLAG_ECN};
use crate::sim::kernel::EventQueue;
use crate::sim::Nanos;

pub struct RxOutcome {
    pub accepted: bool,
    pub feedback: Option<Packet>,
}

pub trait ReliableSender {
    fn poll_transmit(&mut self, now: Nanos) -> Option<Packet>;
    fn on_feedback(&mut self, fb: &Packet, now: Nanos);
    fn timer(&self) -> Option<Nanos>;
    fn on_timer(&mut self, now: Nanos);
    fn idle(&self) -> bool;
    fn retransmissions(&self) -> u64;
}

pub trait ReliableReceiver {
    fn on_packet(&mut self, pkt: &Packet, now: Nanos) -> RxOutcome;
}

#[derive(Debug, Clone)]
pub struct LinkConfig {
    pub rate_gbps: f64,
    pub one_way_ns: Nanos,
    pub cc: Option<CcParams>,
    pub bottleneck_gbps: f64,
    pub background_gbps: f64,
    pub mark_threshold: f64,
    pub record_stream: bool,
    pub time_limit: Nanos,
}

impl LinkConfig {
    pub fn new(rate_gbps: f64, one_way_ns: Nanos) -> Self {
        LinkConfig {
            rate_gbps,
            one_way_ns,
            cc: None,
            bottleneck_gbps: rate_gbps,
            background_gbps: 0.0,
            mark_threshold: 0.95,
            record_stream: true,
            time_limit: Nanos::MAX,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LinkReport {
    pub delivered: Vec<u8>,
    pub delivered_bytes: u64,
    pub messages: u64,
    pub data_packets: u64,
    pub retransmissions: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delayed: u64,
    pub finish_ns: Nanos,
    pub completed: bool,
    pub ports: BTreeMap<u16, u64>,
    pub marks: u64,
    /// (time, rate) after every rate change.
    pub rate_trace: Vec<(Nanos, f64)>,
}

impl LinkReport {
    pub fn goodput_gbps(&self) -> f64 {
        if self.finish_ns == 0 {
            0.0
        } else {
            self.delivered_bytes as f64 * 8.0 / self.finish_ns as f64
        }
    }
}

enum Ev {
    TxReady,
    Arrive(Packet),
    Feedback(Packet),
    Timer(Nanos),
    CcTimer,
}

pub fn run_link<S: ReliableSender, R: ReliableReceiver>(
    sender: &mut S,
    receiver: &mut R,
    faults: &FaultPlan,
    cfg: &LinkConfig,
) -> LinkReport {
    let mut q: EventQueue<Ev> = EventQueue::new();
    let mut rep = LinkReport::default();
    let mut attempts: HashMap<u32, u32> = HashMap::new();
    let mut cc = cfg.cc.map(Dcqcn::new);
    let mut tx_busy = true;
    let mut tx_free_at: Nanos = 0;
    let mut armed_timer: Option<Nanos> = None;

    q.schedule(0, Ev::TxReady).unwrap();
    if let Some(c) = &cc {
        q.schedule(c.params().timer_ns, Ev::CcTimer).unwrap();
        rep.rate_trace.push((0, c.rate_gbps()));
    }

    while let Some(ev) = q.pop_until(cfg.time_limit) {
        let now = ev.fire_time;
        let mut kick = false;
        match ev.action {
            Ev::TxReady => {
                tx_busy = false;
                if let Some(mut pkt) = sender.poll_transmit(now) {
                    let rate = cc
                        .as_ref()
                        .map_or(cfg.rate_gbps, |c| c.rate_gbps().min(cfg.rate_gbps));
                    if let Some(c) = &cc {
                        if c.rate_gbps() + cfg.background_gbps
                            > cfg.mark_threshold * cfg.bottleneck_gbps
                        {
                            pkt.flags |= FLAG_ECN;
                        }
                    }
                    let ser = ((pkt.wire_bytes() * 8) as f64 / rate).ceil() as Nanos;
                    let attempt = attempts.entry(pkt.psn).or_insert(0);
                    let action = faults.decide(pkt.psn, *attempt);
                    *attempt += 1;
                    rep.data_packets += 1;
                    *rep.ports.entry(pkt.udp_src_port).or_insert(0) += 1;
                    let arrive = now + ser + cfg.one_way_ns;
                    match action {
                        FaultAction::Deliver => {
                            q.schedule(arrive, Ev::Arrive(pkt)).unwrap();
                        }
                        FaultAction::Drop => rep.dropped += 1,
                        FaultAction::Duplicate => {
                            rep.duplicated += 1;
                            q.schedule(arrive, Ev::Arrive(pkt.clone())).unwrap();
                            q.schedule(arrive + 1, Ev::Arrive(pkt)).unwrap();
                        }
                        FaultAction::Delay(d) => {
                            rep.delayed += 1;
                            q.schedule(arrive + d, Ev::Arrive(pkt)).unwrap();
                        }
                    }
                    tx_free_at = now + ser;
                    tx_busy = true;
                    q.schedule(tx_free_at, Ev::TxReady).unwrap();
                }
            }
            Ev::Arrive(pkt) => {
                let out = receiver.on_packet(&pkt, now);
                if out.accepted {
                    rep.delivered_bytes += pkt.payload.len() as u64;
                    if cfg.record_stream {
                        rep.delivered.extend_from_slice(&pkt.payload);
                    }
                    if pkt.is_last() {
                        rep.messages += 1;
                    }
                }
                if let Some(fb) = out.feedback {
                    q.schedule(now + cfg.one_way_ns, Ev::Feedback(fb)).unwrap();
                }
            }
            Ev::Feedback(fb) => {
                if fb.ecn() {
                    if let Some(c) = &mut cc {
                        let before = c.rate_gbps();
                        c.on_mark(now);
                        if c.rate_gbps() != before {
                            rep.rate_trace.push((now, c.rate_gbps()));
                        }
                    }
                }
                sender.on_feedback(&fb, now);
                kick = true;
            }
            Ev::Timer(t) => {
                if armed_timer == Some(t) {
                    armed_timer = None;
                    sender.on_timer(now);
                    kick = true;
                }
            }
            Ev::CcTimer => {
                if let Some(c) = &mut cc {
                    let before = c.rate_gbps();
                    c.on_timer(now);
                    if c.rate_gbps() != before {
                        rep.rate_trace.push((now, c.rate_gbps()));
                    }
                    if !sender.idle() {
                        q.schedule(now + c.params().timer_ns, Ev::CcTimer).unwrap();
                    }
                }
            }
        }
        if kick && !tx_busy {
            tx_busy = true;
            q.schedule(now.max(tx_free_at), Ev::TxReady).unwrap();
        }
        match sender.timer() {
            Some(d) if armed_timer != Some(d) => {
                armed_timer = Some(d);
                q.schedule(d.max(now), Ev::Timer(d)).unwrap();
            }
            None => armed_timer = None,
            _ => {}
        }
        if sender.idle() {
            rep.finish_ns = now;
        }
    }
    rep.completed = sender.idle();
    rep.retransmissions = sender.retransmissions();
    if let Some(c) = &cc {
        rep.marks = c.marks();
    }
    rep
}
