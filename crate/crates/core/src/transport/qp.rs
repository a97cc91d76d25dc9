//! Queue pairs: connection state, message posting and receive-side
//! handling of SEND, WRITE and READ over go-back-N.
//!
//! READ responses travel in the responder's own PSN space, built from the
//! responder's memory without involving its application.

use std::collections::{HashSet, VecDeque};
use std::ops::Range;

use thiserror::Error;

use super::cc::{CcParams, Dcqcn};
use super::gbn::{GbnConfig, GbnReceiver, GbnSender};
use super::link::{ReliableReceiver, ReliableSender};
use super::packet::{segment, Opcode, Packet, CUSTOM_OPCODE_BASE};
use crate::sim::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpState {
    Reset,
    Init,
    Rtr,
    Rts,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMode {
    Standard,
    LowLatency,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QpError {
    #[error("illegal transition {from:?} -> {to:?}")]
    Transition { from: QpState, to: QpState },
    #[error("operation needs state {need:?}, qp is {have:?}")]
    State { need: QpState, have: QpState },
    #[error("spraying is only supported for WRITE and READ")]
    SpraySend,
    #[error("memory access out of bounds at {addr:#x}+{len}")]
    Memory { addr: u64, len: usize },
    #[error("opcode {0:#x} is reserved by the transport")]
    Opcode(u8),
}

/// Byte-addressed memory a QP reads from and writes into.
pub trait QpMemory {
    fn read(&self, addr: u64, len: usize) -> Result<Vec<u8>, QpError>;
    fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), QpError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QpEvent {
    /// A SEND segment accepted in order.
    SendSegment {
        payload: Vec<u8>,
        first: bool,
        last: bool,
        msg_len: u32,
    },
    /// A WRITE segment placed at its remote address.
    WritePlaced { addr: u64, len: usize, last: bool },
    /// A READ request was answered with `segments` response packets.
    ReadServed { segments: usize },
    /// All response data for a locally issued READ has landed.
    ReadCompleted { tag: u64, len: u32 },
    /// A segment carrying a user-registered opcode, accepted in order.
    CustomSegment {
        opcode: u8,
        payload: Vec<u8>,
        first: bool,
        last: bool,
        msg_len: u32,
    },
    /// Low-latency mode: payload placed directly; flags are for the
    /// application's own ordering and duplicate handling.
    LowLatencyPlaced {
        psn: u32,
        payload: Vec<u8>,
        duplicate: bool,
        out_of_order: bool,
    },
}

#[derive(Debug)]
struct PendingRead {
    tag: u64,
    local_addr: u64,
    len: u32,
    received: u32,
}

#[derive(Debug)]
pub struct QueuePair {
    pub qp_id: u32,
    pub context_id: u32,
    pub mode: QpMode,
    state: QpState,
    peer: Option<u32>,
    gbn: GbnConfig,
    sender: GbnSender,
    receiver: GbnReceiver,
    spray: Option<(u16, u16)>,
    pub cc: Dcqcn,
    reads: VecDeque<PendingRead>,
    ll_seen: HashSet<u32>,
    ll_dup_flag: bool,
}

impl QueuePair {
    pub fn new(
        qp_id: u32,
        context_id: u32,
        mode: QpMode,
        gbn: GbnConfig,
        line_rate_gbps: f64,
    ) -> Self {
        QueuePair {
            qp_id,
            context_id,
            mode,
            state: QpState::Reset,
            peer: None,
            gbn,
            sender: GbnSender::new(qp_id, 0, gbn),
            receiver: GbnReceiver::new(qp_id, 0),
            spray: None,
            cc: Dcqcn::new(CcParams::with_line_rate(line_rate_gbps)),
            reads: VecDeque::new(),
            ll_seen: HashSet::new(),
            ll_dup_flag: false,
        }
    }

    pub fn state(&self) -> QpState {
        self.state
    }

    pub fn peer(&self) -> Option<u32> {
        self.peer
    }

    pub fn to_init(&mut self) -> Result<(), QpError> {
        self.transition(QpState::Reset, QpState::Init)
    }

    /// Ready to receive: bind the peer and its starting PSN.
    pub fn to_rtr(&mut self, peer: u32, remote_psn: u32) -> Result<(), QpError> {
        self.transition(QpState::Init, QpState::Rtr)?;
        self.peer = Some(peer);
        self.receiver = GbnReceiver::new(self.qp_id, remote_psn);
        Ok(())
    }

    pub fn to_rts(&mut self, local_psn: u32) -> Result<(), QpError> {
        self.transition(QpState::Rtr, QpState::Rts)?;
        self.sender = GbnSender::new(self.qp_id, local_psn, self.gbn);
        if let Some((b, k)) = self.spray {
            self.sender.enable_spray(b, k);
        }
        Ok(())
    }

    pub fn to_error(&mut self) {
        self.state = QpState::Error;
    }

    pub fn reset(&mut self) {
        self.state = QpState::Reset;
        self.peer = None;
        self.reads.clear();
    }

    fn transition(&mut self, from: QpState, to: QpState) -> Result<(), QpError> {
        if self.state != from {
            return Err(QpError::Transition {
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    pub fn enable_spray(&mut self, base: u16, paths: u16) {
        self.spray = Some((base, paths));
        self.sender.enable_spray(base, paths);
    }

    fn require_rts(&self) -> Result<(), QpError> {
        if self.state != QpState::Rts {
            return Err(QpError::State {
                need: QpState::Rts,
                have: self.state,
            });
        }
        Ok(())
    }

    pub fn post_send(&mut self, payload: &[u8]) -> Result<Range<u32>, QpError> {
        self.require_rts()?;
        if self.spray.is_some() {
            return Err(QpError::SpraySend);
        }
        Ok(self.sender.enqueue(Opcode::Send, payload, 0))
    }

    /// Sends `payload` under a user opcode (`>= CUSTOM_OPCODE_BASE`).
    pub fn post_custom(&mut self, opcode: u8, payload: &[u8]) -> Result<Range<u32>, QpError> {
        self.require_rts()?;
        if opcode < CUSTOM_OPCODE_BASE {
            return Err(QpError::Opcode(opcode));
        }
        Ok(self.sender.enqueue(Opcode::Custom(opcode), payload, 0))
    }

    pub fn post_write(&mut self, payload: &[u8], remote_addr: u64) -> Result<Range<u32>, QpError> {
        self.require_rts()?;
        Ok(self.sender.enqueue(Opcode::Write, payload, remote_addr))
    }

    pub fn post_read(
        &mut self,
        tag: u64,
        local_addr: u64,
        remote_addr: u64,
        len: u32,
    ) -> Result<Range<u32>, QpError> {
        self.require_rts()?;
        self.reads.push_back(PendingRead {
            tag,
            local_addr,
            len,
            received: 0,
        });
        Ok(self.sender.enqueue_read(remote_addr, len))
    }

    /// True when the payload fits the inline SQE budget for this QP.
    pub fn fits_inline(&self, len: usize) -> bool {
        self.mode == QpMode::LowLatency && len <= self.gbn.mtu as usize
    }

    pub fn sender(&self) -> &GbnSender {
        &self.sender
    }

    pub fn receiver(&self) -> &GbnReceiver {
        &self.receiver
    }

    pub fn duplicate_flag(&self) -> bool {
        self.ll_dup_flag
    }

    pub fn clear_duplicate_flag(&mut self) {
        self.ll_dup_flag = false;
    }

    pub fn poll_transmit(&mut self, now: Nanos) -> Option<Packet> {
        if self.state == QpState::Error {
            return None;
        }
        self.sender.poll_transmit(now)
    }

    pub fn on_timer(&mut self, now: Nanos) {
        self.sender.on_timer(now)
    }

    pub fn timer(&self) -> Option<Nanos> {
        self.sender.timer()
    }

    pub fn idle(&self) -> bool {
        self.sender.idle()
    }

    /// Handles one arriving packet; returns the feedback to send back and
    /// what happened locally.
    pub fn receive(
        &mut self,
        pkt: &Packet,
        now: Nanos,
        mem: &mut dyn QpMemory,
    ) -> Result<(Option<Packet>, Vec<QpEvent>), QpError> {
        if pkt.opcode.is_feedback() {
            self.sender.on_feedback(pkt, now);
            return Ok((None, Vec::new()));
        }
        if !matches!(self.state, QpState::Rtr | QpState::Rts) {
            return Ok((None, Vec::new()));
        }
        let mut events = Vec::new();
        if self.mode == QpMode::LowLatency && pkt.opcode == Opcode::Send {
            // placed on arrival, even out of order; the GBN receiver still
            // owns sequencing and feedback since all opcodes share one PSN space
            let duplicate = !self.ll_seen.insert(pkt.psn);
            let out_of_order = pkt.psn != self.receiver.expected();
            if duplicate {
                self.ll_dup_flag = true;
            }
            events.push(QpEvent::LowLatencyPlaced {
                psn: pkt.psn,
                payload: pkt.payload.clone(),
                duplicate,
                out_of_order,
            });
            let out = self.receiver.on_packet(pkt, now);
            return Ok((out.feedback, events));
        }
        let out = self.receiver.on_packet(pkt, now);
        if out.accepted {
            match pkt.opcode {
                Opcode::Send => events.push(QpEvent::SendSegment {
                    payload: pkt.payload.clone(),
                    first: pkt.is_first(),
                    last: pkt.is_last(),
                    msg_len: pkt.msg_len,
                }),
                Opcode::Custom(opcode) => events.push(QpEvent::CustomSegment {
                    opcode,
                    payload: pkt.payload.clone(),
                    first: pkt.is_first(),
                    last: pkt.is_last(),
                    msg_len: pkt.msg_len,
                }),
                Opcode::Write => {
                    mem.write(pkt.remote_addr, &pkt.payload)?;
                    events.push(QpEvent::WritePlaced {
                        addr: pkt.remote_addr,
                        len: pkt.payload.len(),
                        last: pkt.is_last(),
                    });
                }
                Opcode::ReadRequest => {
                    let data = mem.read(pkt.remote_addr, pkt.msg_len as usize)?;
                    let segs = segment(Opcode::ReadResponse, self.qp_id, 0, &data, 0, self.gbn.mtu);
                    events.push(QpEvent::ReadServed {
                        segments: segs.len(),
                    });
                    self.sender.push_packets(segs);
                }
                Opcode::ReadResponse => {
                    let r = self
                        .reads
                        .front_mut()
                        .expect("read response without outstanding read");
                    mem.write(r.local_addr + r.received as u64, &pkt.payload)?;
                    r.received += pkt.payload.len() as u32;
                    if pkt.is_last() {
                        let r = self.reads.pop_front().unwrap();
                        events.push(QpEvent::ReadCompleted {
                            tag: r.tag,
                            len: r.len,
                        });
                    }
                }
                _ => {}
            }
        }
        Ok((out.feedback, events))
    }
}

/// Flat memory for tests and loopback devices.
#[derive(Debug, Clone, Default)]
pub struct FlatMemory(pub Vec<u8>);

impl QpMemory for FlatMemory {
    fn read(&self, addr: u64, len: usize) -> Result<Vec<u8>, QpError> {
        let a = addr as usize;
        self.0
            .get(a..a + len)
            .map(|s| s.to_vec())
            .ok_or(QpError::Memory { addr, len })
    }

    fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), QpError> {
        let a = addr as usize;
        let dst = self.0.get_mut(a..a + data.len()).ok_or(QpError::Memory {
            addr,
            len: data.len(),
        })?;
        dst.copy_from_slice(data);
        Ok(())
    }
}

/// Runs two connected QPs over a lossless zero-delay exchange until both
/// are idle; returns the events seen at each side.
pub fn exchange(
    a: &mut QueuePair,
    mem_a: &mut dyn QpMemory,
    b: &mut QueuePair,
    mem_b: &mut dyn QpMemory,
) -> Result<(Vec<QpEvent>, Vec<QpEvent>), QpError> {
    let (mut ev_a, mut ev_b) = (Vec::new(), Vec::new());
    loop {
        let mut progress = false;
        while let Some(p) = a.poll_transmit(0) {
            progress = true;
            let (fb, ev) = b.receive(&p, 0, mem_b)?;
            ev_b.extend(ev);
            if let Some(fb) = fb {
                a.receive(&fb, 0, mem_a)?;
            }
        }
        while let Some(p) = b.poll_transmit(0) {
            progress = true;
            let (fb, ev) = a.receive(&p, 0, mem_a)?;
            ev_a.extend(ev);
            if let Some(fb) = fb {
                b.receive(&fb, 0, mem_b)?;
            }
        }
        if !progress {
            return Ok((ev_a, ev_b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(mode: QpMode) -> (QueuePair, QueuePair) {
        let mut a = QueuePair::new(1, 0, mode, GbnConfig::default(), 400.0);
        let mut b = QueuePair::new(2, 0, mode, GbnConfig::default(), 400.0);
        a.to_init().unwrap();
        b.to_init().unwrap();
        a.to_rtr(2, 100).unwrap();
        b.to_rtr(1, 0).unwrap();
        a.to_rts(0).unwrap();
        b.to_rts(100).unwrap();
        (a, b)
    }

    #[test]
    fn state_machine_order_is_enforced() {
        let mut q = QueuePair::new(1, 0, QpMode::Standard, GbnConfig::default(), 400.0);
        assert!(matches!(q.to_rts(0), Err(QpError::Transition { .. })));
        assert!(matches!(q.post_send(b"x"), Err(QpError::State { .. })));
        q.to_init().unwrap();
        q.to_rtr(2, 0).unwrap();
        q.to_rts(0).unwrap();
        assert_eq!(q.state(), QpState::Rts);
    }

    #[test]
    fn read_8k_gets_two_response_segments() {
        let (mut a, mut b) = pair(QpMode::Standard);
        let mut ma = FlatMemory(vec![0; 16384]);
        let mut mb = FlatMemory((0..16384u32).map(|i| (i % 251) as u8).collect());
        a.post_read(9, 0, 4096, 8192).unwrap();
        let (ev_a, ev_b) = exchange(&mut a, &mut ma, &mut b, &mut mb).unwrap();
        assert_eq!(ev_b, vec![QpEvent::ReadServed { segments: 2 }]);
        assert_eq!(ev_a, vec![QpEvent::ReadCompleted { tag: 9, len: 8192 }]);
        assert_eq!(&ma.0[..8192], &mb.0[4096..4096 + 8192]);
    }

    #[test]
    fn write_places_at_remote_address() {
        let (mut a, mut b) = pair(QpMode::Standard);
        let mut ma = FlatMemory(vec![0; 16]);
        let mut mb = FlatMemory(vec![0; 10_000]);
        a.post_write(&[5u8; 5000], 100).unwrap();
        exchange(&mut a, &mut ma, &mut b, &mut mb).unwrap();
        assert!(mb.0[100..5100].iter().all(|&x| x == 5));
        assert_eq!(mb.0[99], 0);
    }

    #[test]
    fn spray_rejects_send() {
        let (mut a, _) = pair(QpMode::Standard);
        a.enable_spray(1000, 2);
        assert_eq!(a.post_send(b"x"), Err(QpError::SpraySend));
        assert!(a.post_write(b"x", 0).is_ok());
    }

    #[test]
    fn low_latency_duplicates_reach_the_application() {
        let (mut a, mut b) = pair(QpMode::LowLatency);
        let mut mb = FlatMemory::default();
        a.post_send(b"ping").unwrap();
        let p = a.poll_transmit(0).unwrap();
        b.receive(&p, 0, &mut mb).unwrap();
        let (_, ev) = b.receive(&p, 1, &mut mb).unwrap();
        assert!(matches!(
            ev[0],
            QpEvent::LowLatencyPlaced {
                duplicate: true,
                ..
            }
        ));
        assert!(b.duplicate_flag());

        let (mut c, mut d) = pair(QpMode::Standard);
        c.post_send(b"ping").unwrap();
        let p = c.poll_transmit(0).unwrap();
        let (_, first) = d.receive(&p, 0, &mut mb).unwrap();
        let (_, second) = d.receive(&p, 1, &mut mb).unwrap();
        assert_eq!(first.len(), 1);
        assert!(second.is_empty());
    }
}
