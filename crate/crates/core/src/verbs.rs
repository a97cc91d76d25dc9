//! Host-facing verbs on a loopback device.
//!
//! Control verbs act on device state directly. Data verbs only touch
//! notification pipes: SQEs and RQE groups go host to Arm, CQEs come back.
//! The Arm side of the stack runs inside [`Device::progress`], which
//! `poll_cq` and `ring_notify` call, so a single-threaded caller always
//! makes progress. Every QP's peer must live on the same device.
//!
//! Control surface (13): `open_device`, `close_device`, `query_device`,
//! `alloc_context`, `dealloc_context`, `reg_mr`, `dereg_mr`, `create_cq`,
//! `destroy_cq`, `create_qp`, `modify_qp`, `query_qp`, `destroy_qp`.
//! Data surface (4): `post_send`, `post_recv`, `poll_cq`, `ring_notify`.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use thiserror::Error;

use crate::pipe::element::{
    inline_elements, inline_payload, rqe_entries, Cqe, CqeStatus, Rqe, Sqe, WrOpcode, SQE_INLINE,
    SQE_SIGNALED,
};
use crate::pipe::rqe::RqeBatcher;
use crate::pipe::{DmaPipe, ElementKind, PipeElement, PipeError, DEFAULT_COUNTER_PERIOD};
use crate::sim::{HardwareProfile, Nanos};
use crate::transport::qp::FlatMemory;
use crate::transport::{GbnConfig, QpError, QpEvent, QpMode, QpState, QueuePair};
use crate::tx::shadow::{ShadowMemoryRegion, ShadowTable};
use crate::tx::sq::SqMap;
use crate::tx::{resolve, TxError, TxOpcode, TxWorkItem};

const PIPE_DEPTH: usize = 256;
/// Inline payload budget of one SQE (continuation elements included).
pub const MAX_INLINE: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerbsError {
    #[error("unknown context {0}")]
    UnknownContext(u32),
    #[error("unknown cq {0}")]
    UnknownCq(u32),
    #[error("unknown qp {0}")]
    UnknownQp(u32),
    #[error("{0} still in use")]
    Busy(&'static str),
    #[error("host range {addr:#x}+{len} is not inside a registered region")]
    NotRegistered { addr: u64, len: u64 },
    #[error("host memory access out of range at {addr:#x}+{len}")]
    HostRange { addr: u64, len: u64 },
    #[error("notification pipe full, retry after polling")]
    Retry,
    #[error("invalid work request: {0}")]
    InvalidWr(&'static str),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error(transparent)]
    Pipe(#[from] PipeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceAttr {
    pub data_cores: usize,
    pub mtu: u32,
    pub max_inline: usize,
    pub pipe_depth: usize,
    pub host_mem_bytes: u64,
}

/// Target of `modify_qp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpAttr {
    Init,
    Rtr { peer: u32, remote_psn: u32 },
    Rts { local_psn: u32 },
    Error,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendWr {
    pub wr_id: u64,
    pub opcode: WrOpcode,
    /// Host VA of the local buffer (source, or READ destination).
    pub local_addr: u64,
    pub length: u32,
    pub remote_addr: u64,
    pub signaled: bool,
    /// Carry the payload inside the SQE (low-latency QPs).
    pub inline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecvWr {
    pub wr_id: u32,
    pub addr: u64,
    pub length: u32,
}

/// Host view of a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionEntry {
    pub wr_id: u64,
    pub status: CqeStatus,
    pub byte_len: u32,
    pub opcode: WrOpcode,
    pub qp_id: u32,
}

impl From<Cqe> for CompletionEntry {
    fn from(c: Cqe) -> Self {
        CompletionEntry {
            wr_id: c.wr_id,
            status: c.status,
            byte_len: c.byte_len,
            opcode: c.opcode,
            qp_id: c.qp_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub sqes: u64,
    pub rqe_groups: u64,
    pub cqes: u64,
    pub signaled_wrs: u64,
    pub pipe_dmas: u64,
    pub counter_reads: u64,
}

struct Context {
    /// One SQ pipe per data core, shared by the context's QPs on that core.
    sq_pipes: Vec<DmaPipe>,
    mrs: Vec<ShadowMemoryRegion>,
    cqs: BTreeSet<u32>,
    qps: BTreeSet<u32>,
}

struct Cq {
    ctx: u32,
    pipe: DmaPipe,
    /// CQEs waiting for room in the pipe.
    backlog: VecDeque<Cqe>,
    qps: usize,
}

#[derive(Debug)]
struct Outstanding {
    wr_id: u64,
    opcode: WrOpcode,
    len: u32,
    last_psn: u32,
    signaled: bool,
    status: Option<CqeStatus>,
}

struct QpEntry {
    ctx: u32,
    sq: u32,
    qp: QueuePair,
    send_cq: u32,
    recv_cq: u32,
    rq_pipe: DmaPipe,
    rqe: RqeBatcher,
    recvs: VecDeque<Rqe>,
    partial: Vec<u8>,
    unmatched: VecDeque<Vec<u8>>,
    outstanding: VecDeque<Outstanding>,
    reads_done: HashSet<u64>,
}

pub struct Device {
    profile: HardwareProfile,
    mem: FlatMemory,
    now: Nanos,
    contexts: BTreeMap<u32, Context>,
    cqs: BTreeMap<u32, Cq>,
    qps: BTreeMap<u32, QpEntry>,
    shadow: ShadowTable,
    sqs: SqMap,
    next_ctx: u32,
    next_cq: u32,
    next_qp: u32,
    stats: DeviceStats,
}

impl Device {
    pub fn open_device(profile: HardwareProfile, host_mem_bytes: usize) -> Self {
        let cores = profile.data_core_count.max(1) as usize;
        Device {
            profile,
            mem: FlatMemory(vec![0; host_mem_bytes]),
            now: 0,
            contexts: BTreeMap::new(),
            cqs: BTreeMap::new(),
            qps: BTreeMap::new(),
            shadow: ShadowTable::new(),
            sqs: SqMap::new(cores),
            next_ctx: 1,
            next_cq: 1,
            next_qp: 1,
            stats: DeviceStats::default(),
        }
    }

    /// Drains outstanding work and releases everything.
    pub fn close_device(mut self) -> DeviceStats {
        let qps: Vec<u32> = self.qps.keys().copied().collect();
        for q in qps {
            let _ = self.destroy_qp(q);
        }
        self.stats
    }

    pub fn query_device(&self) -> DeviceAttr {
        DeviceAttr {
            data_cores: self.sqs.cores(),
            mtu: GbnConfig::default().mtu,
            max_inline: MAX_INLINE,
            pipe_depth: PIPE_DEPTH,
            host_mem_bytes: self.mem.0.len() as u64,
        }
    }

    pub fn alloc_context(&mut self) -> Result<u32, VerbsError> {
        let id = self.next_ctx;
        self.next_ctx += 1;
        let sq_pipes = (0..self.sqs.cores())
            .map(|_| DmaPipe::new(PIPE_DEPTH, DEFAULT_COUNTER_PERIOD))
            .collect::<Result<_, _>>()?;
        self.contexts.insert(
            id,
            Context {
                sq_pipes,
                mrs: Vec::new(),
                cqs: BTreeSet::new(),
                qps: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn dealloc_context(&mut self, ctx: u32) -> Result<(), VerbsError> {
        let c = self
            .contexts
            .get(&ctx)
            .ok_or(VerbsError::UnknownContext(ctx))?;
        if !c.qps.is_empty() || !c.cqs.is_empty() {
            return Err(VerbsError::Busy("context"));
        }
        if !c.mrs.is_empty() {
            return Err(VerbsError::Busy("context memory regions"));
        }
        self.contexts.remove(&ctx);
        Ok(())
    }

    /// Registers a host buffer; the returned region carries its Arm alias.
    pub fn reg_mr(
        &mut self,
        ctx: u32,
        host_va: u64,
        len: u64,
    ) -> Result<ShadowMemoryRegion, VerbsError> {
        if !self.contexts.contains_key(&ctx) {
            return Err(VerbsError::UnknownContext(ctx));
        }
        self.check_host(host_va, len)?;
        let mr = self.shadow.register(ctx, host_va, len)?;
        self.contexts.get_mut(&ctx).unwrap().mrs.push(mr);
        Ok(mr)
    }

    pub fn dereg_mr(&mut self, mr: &ShadowMemoryRegion) -> Result<(), VerbsError> {
        let c = self
            .contexts
            .get_mut(&mr.context_id)
            .ok_or(VerbsError::UnknownContext(mr.context_id))?;
        self.shadow.deregister(mr.context_id, mr.arm_va)?;
        c.mrs.retain(|m| m.arm_va != mr.arm_va);
        Ok(())
    }

    pub fn create_cq(&mut self, ctx: u32, depth: usize) -> Result<u32, VerbsError> {
        let c = self
            .contexts
            .get_mut(&ctx)
            .ok_or(VerbsError::UnknownContext(ctx))?;
        let id = self.next_cq;
        self.next_cq += 1;
        let pipe = DmaPipe::new(depth, DEFAULT_COUNTER_PERIOD)?;
        c.cqs.insert(id);
        self.cqs.insert(
            id,
            Cq {
                ctx,
                pipe,
                backlog: VecDeque::new(),
                qps: 0,
            },
        );
        Ok(id)
    }

    pub fn destroy_cq(&mut self, cq: u32) -> Result<(), VerbsError> {
        let c = self.cqs.get(&cq).ok_or(VerbsError::UnknownCq(cq))?;
        if c.qps > 0 {
            return Err(VerbsError::Busy("cq"));
        }
        let ctx = c.ctx;
        self.cqs.remove(&cq);
        if let Some(c) = self.contexts.get_mut(&ctx) {
            c.cqs.remove(&cq);
        }
        Ok(())
    }

    pub fn create_qp(
        &mut self,
        ctx: u32,
        send_cq: u32,
        recv_cq: u32,
        mode: QpMode,
    ) -> Result<u32, VerbsError> {
        if !self.contexts.contains_key(&ctx) {
            return Err(VerbsError::UnknownContext(ctx));
        }
        for cq in [send_cq, recv_cq] {
            match self.cqs.get(&cq) {
                Some(c) if c.ctx == ctx => {}
                _ => return Err(VerbsError::UnknownCq(cq)),
            }
        }
        let id = self.next_qp;
        self.next_qp += 1;
        let sq = self.sqs.create_sq(ctx);
        let qp = QueuePair::new(
            id,
            ctx,
            mode,
            GbnConfig::default(),
            self.profile.endpoint_rate_gbps,
        );
        self.qps.insert(
            id,
            QpEntry {
                ctx,
                sq,
                qp,
                send_cq,
                recv_cq,
                rq_pipe: DmaPipe::new(PIPE_DEPTH, DEFAULT_COUNTER_PERIOD)?,
                rqe: RqeBatcher::default(),
                recvs: VecDeque::new(),
                partial: Vec::new(),
                unmatched: VecDeque::new(),
                outstanding: VecDeque::new(),
                reads_done: HashSet::new(),
            },
        );
        self.cqs.get_mut(&send_cq).unwrap().qps += 1;
        self.cqs.get_mut(&recv_cq).unwrap().qps += 1;
        self.contexts.get_mut(&ctx).unwrap().qps.insert(id);
        Ok(id)
    }

    pub fn modify_qp(&mut self, qp: u32, attr: QpAttr) -> Result<(), VerbsError> {
        if let QpAttr::Rtr { peer, .. } = attr {
            if !self.qps.contains_key(&peer) {
                return Err(VerbsError::UnknownQp(peer));
            }
        }
        let e = self.qps.get_mut(&qp).ok_or(VerbsError::UnknownQp(qp))?;
        match attr {
            QpAttr::Init => e.qp.to_init()?,
            QpAttr::Rtr { peer, remote_psn } => e.qp.to_rtr(peer, remote_psn)?,
            QpAttr::Rts { local_psn } => e.qp.to_rts(local_psn)?,
            QpAttr::Error => e.qp.to_error(),
            QpAttr::Reset => e.qp.reset(),
        }
        Ok(())
    }

    pub fn query_qp(&self, qp: u32) -> Result<QpState, VerbsError> {
        Ok(self
            .qps
            .get(&qp)
            .ok_or(VerbsError::UnknownQp(qp))?
            .qp
            .state())
    }

    /// Drains the QP's outstanding work (completions are still delivered),
    /// flushes whatever cannot finish, then destroys it.
    pub fn destroy_qp(&mut self, qp: u32) -> Result<(), VerbsError> {
        if !self.qps.contains_key(&qp) {
            return Err(VerbsError::UnknownQp(qp));
        }
        for _ in 0..64 {
            self.progress()?;
            if self.qps[&qp].outstanding.is_empty() && self.qps[&qp].qp.idle() {
                break;
            }
        }
        let mut e = self.qps.remove(&qp).unwrap();
        for o in e.outstanding.drain(..) {
            self.push_cqe(
                e.send_cq,
                Cqe {
                    wr_id: o.wr_id,
                    status: CqeStatus::Flushed,
                    opcode: o.opcode,
                    qp_id: qp,
                    byte_len: 0,
                },
            );
        }
        self.sqs.destroy_sq(e.sq)?;
        for cq in [e.send_cq, e.recv_cq] {
            if let Some(c) = self.cqs.get_mut(&cq) {
                c.qps -= 1;
            }
        }
        if let Some(c) = self.contexts.get_mut(&e.ctx) {
            c.qps.remove(&qp);
        }
        Ok(())
    }

    // ---- data verbs ----

    pub fn post_send(&mut self, qp: u32, wr: &SendWr) -> Result<(), VerbsError> {
        let e = self.qps.get(&qp).ok_or(VerbsError::UnknownQp(qp))?;
        if e.qp.state() != QpState::Rts {
            return Err(QpError::State {
                need: QpState::Rts,
                have: e.qp.state(),
            }
            .into());
        }
        if !matches!(wr.opcode, WrOpcode::Send | WrOpcode::Write | WrOpcode::Read) {
            return Err(VerbsError::InvalidWr("opcode"));
        }
        let (ctx, sq) = (e.ctx, e.sq);
        let mut flags = if wr.signaled { SQE_SIGNALED } else { 0 };
        let mut batch = Vec::new();
        let mut local = 0;
        if wr.inline {
            if wr.opcode == WrOpcode::Read || wr.length as usize > MAX_INLINE {
                return Err(VerbsError::InvalidWr("inline payload"));
            }
            flags |= SQE_INLINE;
            let data = self.read_host(wr.local_addr, wr.length as usize)?;
            batch.extend(inline_elements(&data));
        } else {
            // the library rewrites host VAs to Arm aliases of registered regions
            let mr = self.contexts[&ctx]
                .mrs
                .iter()
                .find(|m| {
                    wr.local_addr >= m.host_va
                        && wr.local_addr + wr.length as u64 <= m.host_va + m.size
                })
                .ok_or(VerbsError::NotRegistered {
                    addr: wr.local_addr,
                    len: wr.length as u64,
                })?;
            local = mr.arm_va + (wr.local_addr - mr.host_va);
        }
        let sqe = Sqe {
            wr_id: wr.wr_id,
            opcode: wr.opcode,
            flags,
            qp_id: qp,
            local_addr: local,
            length: wr.length,
            remote_addr: wr.remote_addr,
            inline_len: if wr.inline { wr.length as u16 } else { 0 },
        };
        batch.insert(0, sqe.to_element());
        let core = self.sqs.core_of(sq)?;
        let pipe = &mut self.contexts.get_mut(&ctx).unwrap().sq_pipes[core];
        let dma = pipe.produce_blocking(&batch).map_err(|e| match e {
            PipeError::Full { .. } => VerbsError::Retry,
            e => e.into(),
        })?;
        pipe.complete(&dma);
        self.stats.pipe_dmas += 1;
        self.stats.sqes += 1;
        if wr.signaled {
            self.stats.signaled_wrs += 1;
        }
        Ok(())
    }

    /// Queues a receive; entries travel in groups of four, flushed early by
    /// `ring_notify` or the group timer (see [`Device::advance`]).
    pub fn post_recv(&mut self, qp: u32, wr: &RecvWr) -> Result<(), VerbsError> {
        let now = self.now;
        let e = self.qps.get_mut(&qp).ok_or(VerbsError::UnknownQp(qp))?;
        if matches!(e.qp.state(), QpState::Reset | QpState::Error) {
            return Err(QpError::State {
                need: QpState::Init,
                have: e.qp.state(),
            }
            .into());
        }
        if let Some(group) = e.rqe.push(
            Rqe {
                wr_id: wr.wr_id,
                addr: wr.addr,
                length: wr.length,
            },
            now,
        ) {
            Self::send_group(&mut self.stats, e, group)?;
        }
        Ok(())
    }

    pub fn poll_cq(&mut self, cq: u32, max: usize) -> Result<Vec<CompletionEntry>, VerbsError> {
        if !self.cqs.contains_key(&cq) {
            return Err(VerbsError::UnknownCq(cq));
        }
        self.progress()?;
        let c = self.cqs.get_mut(&cq).unwrap();
        let mut out = Vec::new();
        while out.len() < max {
            let Some(e) = c.pipe.consume() else { break };
            out.push(Cqe::from_element(&e)?.into());
        }
        Ok(out)
    }

    /// Flushes the QP's partial receive group and lets the stack run.
    pub fn ring_notify(&mut self, qp: u32) -> Result<(), VerbsError> {
        let e = self.qps.get_mut(&qp).ok_or(VerbsError::UnknownQp(qp))?;
        if let Some(group) = e.rqe.flush() {
            Self::send_group(&mut self.stats, e, group)?;
        }
        self.progress()
    }

    // ---- host memory and time ----

    pub fn write_host(&mut self, addr: u64, data: &[u8]) -> Result<(), VerbsError> {
        self.check_host(addr, data.len() as u64)?;
        self.mem.0[addr as usize..addr as usize + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn read_host(&self, addr: u64, len: usize) -> Result<Vec<u8>, VerbsError> {
        self.check_host(addr, len as u64)?;
        Ok(self.mem.0[addr as usize..addr as usize + len].to_vec())
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Moves the device clock forward, firing receive-group timers.
    pub fn advance(&mut self, dt: Nanos) -> Result<(), VerbsError> {
        self.now += dt;
        let now = self.now;
        for e in self.qps.values_mut() {
            if let Some(group) = e.rqe.poll(now) {
                Self::send_group(&mut self.stats, e, group)?;
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> &DeviceStats {
        &self.stats
    }

    pub fn pending_recvs(&self, qp: u32) -> Result<usize, VerbsError> {
        Ok(self
            .qps
            .get(&qp)
            .ok_or(VerbsError::UnknownQp(qp))?
            .recvs
            .len())
    }

    fn check_host(&self, addr: u64, len: u64) -> Result<(), VerbsError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.mem.0.len() as u64 => Ok(()),
            _ => Err(VerbsError::HostRange { addr, len }),
        }
    }

    fn send_group(
        stats: &mut DeviceStats,
        e: &mut QpEntry,
        group: PipeElement,
    ) -> Result<(), VerbsError> {
        let dma = e
            .rq_pipe
            .produce_blocking(&[group])
            .map_err(|err| match err {
                PipeError::Full { .. } => VerbsError::Retry,
                err => err.into(),
            })?;
        e.rq_pipe.complete(&dma);
        stats.pipe_dmas += 1;
        stats.rqe_groups += 1;
        Ok(())
    }

    // ---- Arm side ----

    /// One pass of the stack: drain SQ and RQ pipes, run the transport
    /// between local QPs until quiet, and publish completions.
    pub fn progress(&mut self) -> Result<(), VerbsError> {
        self.drain_sq_pipes()?;
        for e in self.qps.values_mut() {
            while let Some(el) = e.rq_pipe.consume() {
                e.recvs.extend(rqe_entries(&el)?);
            }
        }
        self.run_transport()?;
        let ids: Vec<u32> = self.qps.keys().copied().collect();
        for id in ids {
            self.match_receives(id)?;
            self.retire(id);
        }
        self.flush_cq_backlogs()
    }

    fn drain_sq_pipes(&mut self) -> Result<(), VerbsError> {
        let ctxs: Vec<u32> = self.contexts.keys().copied().collect();
        for ctx in ctxs {
            for core in 0..self.sqs.cores() {
                loop {
                    let pipe = &mut self.contexts.get_mut(&ctx).unwrap().sq_pipes[core];
                    let Some(el) = pipe.consume() else { break };
                    let sqe = Sqe::from_element(&el)?;
                    let mut inline = Vec::new();
                    if sqe.flags & SQE_INLINE != 0 {
                        let n =
                            (sqe.inline_len as usize).div_ceil(crate::pipe::element::BODY_BYTES);
                        for _ in 0..n {
                            let c = pipe
                                .consume()
                                .ok_or(PipeError::BadField("inline continuation"))?;
                            if c.kind != ElementKind::Inline {
                                return Err(PipeError::WrongKind {
                                    expected: ElementKind::Inline,
                                    got: c.kind,
                                }
                                .into());
                            }
                            inline.push(c);
                        }
                    }
                    self.execute(sqe, &inline)?;
                }
            }
        }
        Ok(())
    }

    fn execute(&mut self, sqe: Sqe, inline: &[PipeElement]) -> Result<(), VerbsError> {
        let Some(e) = self.qps.get(&sqe.qp_id) else {
            return Ok(());
        };
        let sq = e.sq;
        self.sqs.submit(sq)?;
        let fail = |status| Outstanding {
            wr_id: sqe.wr_id,
            opcode: sqe.opcode,
            len: 0,
            last_psn: 0,
            signaled: true,
            status: Some(status),
        };
        let resolved = if sqe.flags & SQE_INLINE != 0 {
            Ok(None)
        } else {
            let item = TxWorkItem {
                sq_id: sq,
                opcode: if sqe.opcode == WrOpcode::Send {
                    TxOpcode::Send
                } else {
                    TxOpcode::Write
                },
                arm_va: sqe.local_addr,
                length: sqe.length as u64,
                remote_addr: sqe.remote_addr,
                signaled: sqe.signaled(),
            };
            resolve(&item, &self.sqs, &self.shadow).map(Some)
        };
        let host = match resolved {
            Ok(h) => h,
            Err(_) => {
                self.qps
                    .get_mut(&sqe.qp_id)
                    .unwrap()
                    .outstanding
                    .push_back(fail(CqeStatus::LocalProtection));
                return Ok(());
            }
        };
        let payload = match (host, sqe.opcode) {
            (_, WrOpcode::Read) => Vec::new(),
            (Some(h), _) => self.read_host(h, sqe.length as usize)?,
            (None, _) => inline_payload(inline, sqe.inline_len as usize),
        };
        let e = self.qps.get_mut(&sqe.qp_id).unwrap();
        let range = match sqe.opcode {
            WrOpcode::Send => e.qp.post_send(&payload),
            WrOpcode::Write => e.qp.post_write(&payload, sqe.remote_addr),
            _ => {
                e.qp.post_read(sqe.wr_id, host.unwrap_or(0), sqe.remote_addr, sqe.length)
            }
        };
        match range {
            Ok(r) => e.outstanding.push_back(Outstanding {
                wr_id: sqe.wr_id,
                opcode: sqe.opcode,
                len: sqe.length,
                last_psn: r.end - 1,
                signaled: sqe.signaled(),
                status: None,
            }),
            Err(_) => e.outstanding.push_back(fail(CqeStatus::TransportRetry)),
        }
        Ok(())
    }

    fn run_transport(&mut self) -> Result<(), VerbsError> {
        let now = self.now;
        loop {
            let mut moved = false;
            let ids: Vec<u32> = self.qps.keys().copied().collect();
            for id in ids {
                while let Some(pkt) = self.qps.get_mut(&id).and_then(|e| e.qp.poll_transmit(now)) {
                    moved = true;
                    let Some(peer) = self.qps[&id].qp.peer() else {
                        continue;
                    };
                    let Some(mut dst) = self.qps.remove(&peer) else {
                        continue;
                    };
                    let res = dst.qp.receive(&pkt, now, &mut self.mem);
                    let fb = match res {
                        Ok((fb, events)) => {
                            for ev in events {
                                Self::on_event(&mut dst, ev);
                            }
                            fb
                        }
                        Err(_) => {
                            dst.qp.to_error();
                            None
                        }
                    };
                    self.qps.insert(peer, dst);
                    if let Some(fb) = fb {
                        let src = self.qps.get_mut(&id).unwrap();
                        let (_, events) = src.qp.receive(&fb, now, &mut self.mem)?;
                        for ev in events {
                            Self::on_event(src, ev);
                        }
                    }
                }
            }
            if !moved {
                return Ok(());
            }
        }
    }

    fn on_event(e: &mut QpEntry, ev: QpEvent) {
        match ev {
            QpEvent::SendSegment { payload, last, .. } => {
                e.partial.extend_from_slice(&payload);
                if last {
                    e.unmatched.push_back(std::mem::take(&mut e.partial));
                }
            }
            QpEvent::LowLatencyPlaced {
                payload, duplicate, ..
            } => {
                // the application dedups; one placement per fresh packet
                if !duplicate {
                    e.unmatched.push_back(payload);
                }
            }
            QpEvent::ReadCompleted { tag, .. } => {
                e.reads_done.insert(tag);
            }
            _ => {}
        }
    }

    fn match_receives(&mut self, id: u32) -> Result<(), VerbsError> {
        loop {
            let e = self.qps.get_mut(&id).unwrap();
            if e.unmatched.is_empty() || e.recvs.is_empty() {
                return Ok(());
            }
            let msg = e.unmatched.pop_front().unwrap();
            let r = e.recvs.pop_front().unwrap();
            let cq = e.recv_cq;
            let status = if msg.len() as u64 > r.length as u64
                || self.check_host(r.addr, msg.len() as u64).is_err()
            {
                CqeStatus::LocalProtection
            } else {
                self.mem.0[r.addr as usize..r.addr as usize + msg.len()].copy_from_slice(&msg);
                CqeStatus::Success
            };
            let byte_len = if status == CqeStatus::Success {
                msg.len() as u32
            } else {
                0
            };
            self.push_cqe(
                cq,
                Cqe {
                    wr_id: r.wr_id as u64,
                    status,
                    opcode: WrOpcode::Recv,
                    qp_id: id,
                    byte_len,
                },
            );
        }
    }

    /// Completes send-side work in posting order.
    fn retire(&mut self, id: u32) {
        let mut done = Vec::new();
        let e = self.qps.get_mut(&id).unwrap();
        let wm = e.qp.sender().watermark();
        while let Some(o) = e.outstanding.front() {
            let status = match (o.status, o.opcode) {
                (Some(s), _) => s,
                (None, WrOpcode::Read) if e.reads_done.remove(&o.wr_id) => CqeStatus::Success,
                (None, WrOpcode::Read) => break,
                (None, _) if wm.is_some_and(|w| w >= o.last_psn) => CqeStatus::Success,
                _ => break,
            };
            let o = e.outstanding.pop_front().unwrap();
            if o.signaled || status != CqeStatus::Success {
                let byte_len = if status == CqeStatus::Success {
                    o.len
                } else {
                    0
                };
                done.push(Cqe {
                    wr_id: o.wr_id,
                    status,
                    opcode: o.opcode,
                    qp_id: id,
                    byte_len,
                });
            }
        }
        let (cq, sq) = (e.send_cq, e.sq);
        let n = done.len() as u64;
        for c in done {
            self.push_cqe(cq, c);
        }
        let _ = self.sqs.finish(sq, n);
    }

    fn push_cqe(&mut self, cq: u32, c: Cqe) {
        if let Some(q) = self.cqs.get_mut(&cq) {
            q.backlog.push_back(c);
        }
    }

    fn flush_cq_backlogs(&mut self) -> Result<(), VerbsError> {
        for q in self.cqs.values_mut() {
            while let Some(c) = q.backlog.front() {
                let before = q.pipe.producer().counter_reads();
                match q.pipe.produce_blocking(&[c.to_element()]) {
                    Ok(dma) => {
                        q.pipe.complete(&dma);
                        q.backlog.pop_front();
                        self.stats.cqes += 1;
                        self.stats.pipe_dmas += 1;
                        self.stats.counter_reads += q.pipe.producer().counter_reads() - before;
                    }
                    Err(PipeError::Full { .. }) => break,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }
}
