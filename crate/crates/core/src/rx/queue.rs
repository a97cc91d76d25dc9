//! Per-core RX queue and the four pipeline stages of one buffer.

use std::collections::VecDeque;

use crate::cache::{AccessReport, Llc};
use crate::sim::Nanos;
use crate::transport::packet::{Opcode, Packet, HEADER_BYTES};
use crate::transport::{GbnReceiver, ReliableReceiver};

use super::{RxError, RxMode};

/// Handle for one occupied buffer. Not `Clone`: each stage consumes the
/// token of the previous one, so a buffer cannot skip or repeat a stage.
#[derive(Debug)]
pub struct RxStageToken {
    core_id: usize,
    buffer_id: usize,
    stage: u8,
    header: Packet,
    host_dest: Option<u64>,
}

impl RxStageToken {
    pub fn buffer_id(&self) -> usize {
        self.buffer_id
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn header(&self) -> &Packet {
        &self.header
    }

    pub fn host_dest(&self) -> Option<u64> {
        self.host_dest
    }
}

#[derive(Debug)]
pub struct Processed {
    /// `None` when the packet was rejected and its buffer already recycled.
    pub token: Option<RxStageToken>,
    pub feedback: Option<Packet>,
    pub report: AccessReport,
}

#[derive(Debug)]
pub struct Delivered {
    pub token: RxStageToken,
    pub host_dest: u64,
    pub len: u64,
    pub report: AccessReport,
}

#[derive(Debug)]
pub struct RxQueue {
    core_id: usize,
    mode: RxMode,
    element_bytes: u64,
    stride: u64,
    pitch: u64,
    base: u64,
    stage: Vec<u8>,
    free: VecDeque<usize>,
    receiver: GbnReceiver,
    posted: VecDeque<u64>,
    regions: Vec<(u64, u64)>,
}

impl RxQueue {
    /// `element_count` buffers of `element_bytes` each (rounded up to whole
    /// lines), laid out back to back from the line-aligned `base`.
    pub fn new(
        core_id: usize,
        mode: RxMode,
        element_bytes: u64,
        element_count: usize,
        base: u64,
        line_bytes: u64,
    ) -> Result<Self, RxError> {
        if element_count == 0 || element_bytes < HEADER_BYTES as u64 {
            return Err(RxError::Config(
                "queue needs at least one element of at least one header".into(),
            ));
        }
        if base % line_bytes != 0 {
            return Err(RxError::Config(format!(
                "base {base:#x} is not line aligned"
            )));
        }
        Ok(RxQueue {
            core_id,
            mode,
            element_bytes,
            stride: element_bytes.div_ceil(line_bytes) * line_bytes,
            pitch: element_bytes.div_ceil(line_bytes) * line_bytes,
            base,
            stage: vec![0; element_count],
            free: (0..element_count).collect(),
            receiver: GbnReceiver::new(core_id as u32, 0),
            posted: VecDeque::new(),
            regions: Vec::new(),
        })
    }

    /// Distance between consecutive buffers, for interleaving several
    /// queues in one region. Must be a whole number of buffer strides.
    pub fn with_pitch(mut self, pitch: u64) -> Result<Self, RxError> {
        if pitch == 0 || pitch % self.stride != 0 {
            return Err(RxError::Config(format!(
                "pitch {pitch} is not a multiple of the {} B stride",
                self.stride
            )));
        }
        self.pitch = pitch;
        Ok(self)
    }

    pub fn core_id(&self) -> usize {
        self.core_id
    }

    pub fn mode(&self) -> RxMode {
        self.mode
    }

    pub fn element_count(&self) -> usize {
        self.stage.len()
    }

    pub fn free_buffers(&self) -> usize {
        self.free.len()
    }

    pub fn buffer(&self, id: usize) -> (u64, u64) {
        (self.base + id as u64 * self.pitch, self.stride)
    }

    pub fn expected_psn(&self) -> u32 {
        self.receiver.expected()
    }

    /// Host buffer for the next SEND.
    pub fn post_recv(&mut self, host_addr: u64) {
        self.posted.push_back(host_addr);
    }

    /// Host range WRITEs may target.
    pub fn allow_region(&mut self, host_addr: u64, len: u64) {
        self.regions.push((host_addr, len));
    }

    /// Stage 1: NIC writes the packet into a free buffer through the cache.
    pub fn rx_arrive(
        &mut self,
        pkt: &Packet,
        llc: &mut Llc,
    ) -> Result<(RxStageToken, AccessReport), RxError> {
        let bytes = pkt.wire_bytes();
        if bytes > self.element_bytes {
            return Err(RxError::TooLarge {
                bytes,
                element: self.element_bytes,
            });
        }
        let id = self
            .free
            .pop_front()
            .ok_or(RxError::NoBuffer(self.core_id))?;
        let (addr, _) = self.buffer(id);
        let report = llc.write(addr, bytes);
        self.stage[id] = 2;
        let mut header = pkt.clone();
        header.payload = Vec::new();
        let token = RxStageToken {
            core_id: self.core_id,
            buffer_id: id,
            stage: 2,
            header,
            host_dest: None,
        };
        Ok((token, report))
    }

    /// Stage 2: header parse, PSN check and ACK/NAK. Rejected packets have
    /// their buffer recycled immediately.
    pub fn rx_process(
        &mut self,
        mut token: RxStageToken,
        llc: &mut Llc,
        now: Nanos,
    ) -> Result<Processed, RxError> {
        self.check(&token, 2)?;
        let (addr, _) = self.buffer(token.buffer_id);
        let report = llc.read(addr, HEADER_BYTES as u64);
        let outcome = self.receiver.on_packet(&token.header, now);
        if !outcome.accepted {
            self.recycle(token.buffer_id, llc)?;
            return Ok(Processed {
                token: None,
                feedback: outcome.feedback,
                report,
            });
        }
        let len = token.header.length as u64;
        token.host_dest = match token.header.opcode {
            Opcode::Write | Opcode::ReadResponse => {
                let a = token.header.remote_addr;
                self.regions
                    .iter()
                    .any(|&(base, size)| a >= base && a.saturating_add(len) <= base + size)
                    .then_some(a)
            }
            _ => self.posted.pop_front(),
        };
        token.stage = 3;
        self.stage[token.buffer_id] = 3;
        Ok(Processed {
            token: Some(token),
            feedback: outcome.feedback,
            report,
        })
    }

    /// Stage 3: DMA read of the payload for transfer to the host. A missing
    /// or invalid destination recycles the buffer and reports a fault.
    pub fn rx_deliver(
        &mut self,
        mut token: RxStageToken,
        llc: &mut Llc,
    ) -> Result<Delivered, RxError> {
        self.check(&token, 3)?;
        let len = token.header.length as u64;
        let Some(host_dest) = token.host_dest else {
            self.recycle(token.buffer_id, llc)?;
            return Err(RxError::Fault {
                core: self.core_id,
                addr: token.header.remote_addr,
                len,
            });
        };
        let (addr, _) = self.buffer(token.buffer_id);
        let report = llc.read(addr + HEADER_BYTES as u64, len);
        token.stage = 4;
        self.stage[token.buffer_id] = 4;
        Ok(Delivered {
            token,
            host_dest,
            len,
            report,
        })
    }

    /// Stage 4: discard the buffer's lines (self-invalidate mode only) and
    /// return it to the free pool. Returns the number of lines discarded.
    pub fn rx_invalidate(&mut self, token: RxStageToken, llc: &mut Llc) -> Result<u64, RxError> {
        self.check(&token, 4)?;
        self.recycle(token.buffer_id, llc)
    }

    fn recycle(&mut self, id: usize, llc: &mut Llc) -> Result<u64, RxError> {
        let lines = if self.mode == RxMode::SelfInvalidate {
            let (addr, len) = self.buffer(id);
            llc.invalidate(addr, len)?
        } else {
            0
        };
        self.stage[id] = 0;
        self.free.push_back(id);
        Ok(lines)
    }

    fn check(&self, token: &RxStageToken, stage: u8) -> Result<(), RxError> {
        if token.core_id != self.core_id
            || self.stage.get(token.buffer_id) != Some(&stage)
            || token.stage != stage
        {
            return Err(RxError::Stage {
                buffer: token.buffer_id,
                expected: stage,
                found: token.stage,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{CacheGeometry, LineState};

    fn llc() -> Llc {
        Llc::new(CacheGeometry::new(1 << 20, 64, 16).unwrap())
    }

    fn pkt(op: Opcode, psn: u32, payload: u16, raddr: u64) -> Packet {
        let mut p = Packet::control(op, 0, psn);
        p.length = payload;
        p.remote_addr = raddr;
        p
    }

    fn queue(mode: RxMode, n: usize) -> RxQueue {
        let mut q = RxQueue::new(0, mode, 8192, n, 0x100_0000, 64).unwrap();
        q.allow_region(0x9000_0000, 1 << 20);
        q
    }

    #[test]
    fn arrival_into_cold_cache_allocates_without_fill() {
        let mut c = llc();
        let mut q = queue(RxMode::SelfInvalidate, 4);
        let (t, rep) = q
            .rx_arrive(&pkt(Opcode::Write, 0, 8192 - 64, 0x9000_0000), &mut c)
            .unwrap();
        assert_eq!(rep.misses, 128);
        assert_eq!(rep.memory_bytes(), 0);
        assert_eq!(c.dirty_lines(), 128);
        assert_eq!(t.stage(), 2);
    }

    #[test]
    fn full_pipeline_is_memory_silent_and_recycles() {
        let mut c = llc();
        let mut q = queue(RxMode::SelfInvalidate, 2);
        for psn in 0..10 {
            let (t, r1) = q
                .rx_arrive(&pkt(Opcode::Write, psn, 4032, 0x9000_0000), &mut c)
                .unwrap();
            let p = q.rx_process(t, &mut c, 0).unwrap();
            assert_eq!(p.feedback.as_ref().unwrap().opcode, Opcode::Ack);
            let d = q.rx_deliver(p.token.unwrap(), &mut c).unwrap();
            assert_eq!((d.host_dest, d.len), (0x9000_0000, 4032));
            assert_eq!(
                r1.memory_bytes() + p.report.memory_bytes() + d.report.memory_bytes(),
                0
            );
            assert!(q.rx_invalidate(d.token, &mut c).unwrap() > 0);
        }
        assert_eq!(q.free_buffers(), 2);
        assert_eq!(c.resident_lines(), 0);
    }

    #[test]
    fn psn_gap_naks_and_frees_buffer() {
        let mut c = llc();
        let mut q = queue(RxMode::SelfInvalidate, 2);
        let (t, _) = q
            .rx_arrive(&pkt(Opcode::Write, 3, 100, 0x9000_0000), &mut c)
            .unwrap();
        let p = q.rx_process(t, &mut c, 0).unwrap();
        assert!(p.token.is_none());
        assert_eq!(p.feedback.unwrap().opcode, Opcode::Nak);
        assert_eq!(q.free_buffers(), 2);
        assert_eq!(c.state_of(0x100_0000), LineState::Invalid);
    }

    #[test]
    fn send_uses_posted_receive_and_bad_write_faults() {
        let mut c = llc();
        let mut q = queue(RxMode::NaiveDma, 2);
        q.post_recv(0x5000);
        let (t, _) = q.rx_arrive(&pkt(Opcode::Send, 0, 64, 0), &mut c).unwrap();
        let p = q.rx_process(t, &mut c, 0).unwrap();
        assert_eq!(p.token.as_ref().unwrap().host_dest(), Some(0x5000));
        let (t, _) = q
            .rx_arrive(&pkt(Opcode::Write, 1, 64, 0x1234), &mut c)
            .unwrap();
        let p2 = q.rx_process(t, &mut c, 0).unwrap();
        assert!(matches!(
            q.rx_deliver(p2.token.unwrap(), &mut c),
            Err(RxError::Fault { .. })
        ));
        assert_eq!(q.free_buffers(), 1);
    }

    #[test]
    fn out_of_stage_token_rejected_and_exhaustion_reported() {
        let mut c = llc();
        let mut q = queue(RxMode::SelfInvalidate, 1);
        let (t, _) = q
            .rx_arrive(&pkt(Opcode::Write, 0, 64, 0x9000_0000), &mut c)
            .unwrap();
        assert!(matches!(
            q.rx_arrive(&pkt(Opcode::Write, 1, 64, 0x9000_0000), &mut c),
            Err(RxError::NoBuffer(0))
        ));
        assert!(matches!(
            q.rx_invalidate(t, &mut c),
            Err(RxError::Stage {
                expected: 4,
                found: 2,
                ..
            })
        ));
        let big = pkt(Opcode::Write, 0, 9000, 0);
        assert!(matches!(
            q.rx_arrive(&big, &mut c),
            Err(RxError::TooLarge { .. })
        ));
    }
}
