//! Programmable offload engine.
//!
//! Packets carrying a registered user opcode are received like a SEND, then
//! handed from the stack core to an engine core over an atomic queue. Each
//! request runs its handler as a cooperative task; `wait_dma_finish` is the
//! only suspension point and woken tasks resume in FIFO order.
//!
//! The engine is passive: a driver feeds requests with [`OffloadEngine::deliver`],
//! drains [`OffloadEngine::take_dma_requests`], reports completions with
//! [`OffloadEngine::complete_dma`] and collects [`OffloadEngine::take_responses`].

pub mod bench;
pub mod handlers;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use thiserror::Error;

use crate::pipe::element::PipeElement;
use crate::pipe::PipeError;
use crate::sim::Nanos;
use crate::transport::packet::CUSTOM_OPCODE_BASE;

pub use crate::pipe::shm::{
    shm_pipe as atomic_queue, ShmConsumer as AtomicQueueConsumer,
    ShmProducer as AtomicQueueProducer,
};

pub const DEFAULT_RESP_CAP: u64 = 1 << 20;
pub const DEFAULT_CTX_TIMEOUT: Nanos = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OffloadError {
    #[error("opcode {0:#x} belongs to the transport")]
    ReservedOpcode(u8),
    #[error("opcode {0:#x} already has a handler")]
    DuplicateOpcode(u8),
    #[error("no handler for opcode {opcode:#x} on qp {qp}")]
    Unregistered { opcode: u8, qp: u32 },
    #[error("zero-sized request")]
    ZeroSize,
    #[error("allocation of {size} B exceeds the {cap} B cap")]
    RespCap { size: u64, cap: u64 },
    #[error("host range {host_addr:#x} overlaps a registered region")]
    Overlap { host_addr: u64 },
    #[error("Arm range {addr:#x}+{len} is not a response allocation of this context")]
    NotAllocated { addr: u64, len: u64 },
    #[error("unknown dma id {0}")]
    UnknownDma(u64),
    #[error("DMA to unregistered host range {host_addr:#x}+{size}")]
    Fault { host_addr: u64, size: u64 },
    #[error("context {0} already submitted its response")]
    DoubleSubmit(u64),
    #[error("context {ctx} still has {count} DMA(s) in flight")]
    OutstandingDma { ctx: u64, count: usize },
    #[error("unknown or retired context {0}")]
    UnknownContext(u64),
    #[error("atomic queue: {0}")]
    Queue(#[from] PipeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaOp {
    /// Host memory into the Arm buffer.
    Read,
    /// Arm buffer out to host memory.
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaRequest {
    pub id: u64,
    pub ctx: u64,
    pub core: usize,
    pub op: DmaOp,
    pub host_addr: u64,
    pub arm_addr: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseStatus {
    Ok,
    /// The handler returned without submitting a response.
    NoResponse,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadResponse {
    pub ctx: u64,
    pub qp: u32,
    pub opcode: u8,
    pub core: usize,
    pub payload: Vec<u8>,
    pub status: ResponseStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaRegion {
    pub host_addr: u64,
    pub size: u64,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub engine_cores: usize,
    pub data_cores: usize,
    pub resp_cap: u64,
    pub ctx_timeout: Nanos,
    pub queue_depth: usize,
}

impl EngineConfig {
    pub fn new(data_cores: usize, engine_cores: usize) -> Self {
        EngineConfig {
            engine_cores,
            data_cores,
            resp_cap: DEFAULT_RESP_CAP,
            ctx_timeout: DEFAULT_CTX_TIMEOUT,
            queue_depth: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub invocations: u64,
    pub dmas: u64,
    pub dma_faults: u64,
    pub responses: u64,
    pub error_retirements: u64,
}

/// Sparse byte-addressed host memory.
#[derive(Debug, Clone, Default)]
pub struct HostMemory {
    pages: HashMap<u64, Box<[u8; 4096]>>,
}

impl HostMemory {
    pub fn read(&self, addr: u64, len: usize) -> Vec<u8> {
        (0..len as u64)
            .map(|i| {
                let a = addr + i;
                self.pages
                    .get(&(a / 4096))
                    .map_or(0, |p| p[(a % 4096) as usize])
            })
            .collect()
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        for (i, b) in data.iter().enumerate() {
            let a = addr + i as u64;
            self.pages
                .entry(a / 4096)
                .or_insert_with(|| Box::new([0; 4096]))[(a % 4096) as usize] = *b;
        }
    }
}

enum DmaState {
    Pending {
        ctx: u64,
        waited: bool,
    },
    Done {
        ctx: u64,
        result: Result<(), OffloadError>,
    },
}

struct CtxState {
    qp: u32,
    opcode: u8,
    core: usize,
    request: Vec<u8>,
    allocs: Vec<u64>,
    responded: bool,
    started: Nanos,
}

struct Inner {
    cfg: EngineConfig,
    now: Nanos,
    host: HostMemory,
    regions: Vec<DmaRegion>,
    arm: BTreeMap<u64, Vec<u8>>,
    next_arm: u64,
    ctxs: BTreeMap<u64, CtxState>,
    dmas: HashMap<u64, DmaState>,
    next_dma: u64,
    submitted: VecDeque<DmaRequest>,
    woken: VecDeque<u64>,
    responses: VecDeque<OffloadResponse>,
    stats: EngineStats,
}

impl Inner {
    fn ctx(&self, id: u64) -> Result<&CtxState, OffloadError> {
        self.ctxs.get(&id).ok_or(OffloadError::UnknownContext(id))
    }

    fn host_allowed(&self, addr: u64, size: u64) -> bool {
        self.regions
            .iter()
            .any(|r| addr >= r.host_addr && addr.saturating_add(size) <= r.host_addr + r.size)
    }

    /// Allocation base containing `addr..addr+len` among `ctx`'s buffers.
    fn alloc_of(&self, ctx: &CtxState, addr: u64, len: u64) -> Option<u64> {
        ctx.allocs.iter().copied().find(|&base| {
            let size = self.arm[&base].len() as u64;
            addr >= base && addr.saturating_add(len) <= base + size
        })
    }

    fn pending_of(&self, ctx: u64) -> usize {
        self.dmas
            .values()
            .filter(|d| matches!(d, DmaState::Pending { ctx: c, .. } if *c == ctx))
            .count()
    }

    fn retire(&mut self, id: u64, status: Option<ResponseStatus>) {
        if let Some(c) = self.ctxs.remove(&id) {
            for a in &c.allocs {
                self.arm.remove(a);
            }
            self.dmas.retain(|_, d| match d {
                DmaState::Pending { ctx, .. } | DmaState::Done { ctx, .. } => *ctx != id,
            });
            if let Some(status) = status {
                self.stats.error_retirements += 1;
                self.responses.push_back(OffloadResponse {
                    ctx: id,
                    qp: c.qp,
                    opcode: c.opcode,
                    core: c.core,
                    payload: Vec::new(),
                    status,
                });
            }
        }
    }
}

/// Handle a handler uses for its request; the four per-request calls of
/// the engine API live here.
#[derive(Clone)]
pub struct OffloadCtx {
    id: u64,
    inner: Rc<RefCell<Inner>>,
}

impl OffloadCtx {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn request(&self) -> Vec<u8> {
        self.inner
            .borrow()
            .ctx(self.id)
            .map(|c| c.request.clone())
            .unwrap_or_default()
    }

    pub fn now(&self) -> Nanos {
        self.inner.borrow().now
    }

    /// Pinned Arm buffer for the response, freed when the context retires.
    pub fn alloc_resp(&self, size: u64) -> Result<u64, OffloadError> {
        let mut inner = self.inner.borrow_mut();
        inner.ctx(self.id)?;
        if size == 0 {
            return Err(OffloadError::ZeroSize);
        }
        if size > inner.cfg.resp_cap {
            return Err(OffloadError::RespCap {
                size,
                cap: inner.cfg.resp_cap,
            });
        }
        let addr = inner.next_arm;
        inner.next_arm += size.div_ceil(64) * 64;
        inner.arm.insert(addr, vec![0; size as usize]);
        inner.ctxs.get_mut(&self.id).unwrap().allocs.push(addr);
        Ok(addr)
    }

    /// Queues a DMA between a registered host range and one of this
    /// context's Arm buffers. A host range outside every registered region
    /// still yields an id; waiting on it reports the fault.
    pub fn submit_dma(
        &self,
        op: DmaOp,
        host_addr: u64,
        arm_addr: u64,
        size: u64,
    ) -> Result<u64, OffloadError> {
        let mut inner = self.inner.borrow_mut();
        let ctx = inner.ctx(self.id)?;
        if size == 0 {
            return Err(OffloadError::ZeroSize);
        }
        if inner.alloc_of(ctx, arm_addr, size).is_none() {
            return Err(OffloadError::NotAllocated {
                addr: arm_addr,
                len: size,
            });
        }
        let core = ctx.core;
        let id = inner.next_dma;
        inner.next_dma += 1;
        inner.stats.dmas += 1;
        if inner.host_allowed(host_addr, size) {
            inner.dmas.insert(
                id,
                DmaState::Pending {
                    ctx: self.id,
                    waited: false,
                },
            );
            inner.submitted.push_back(DmaRequest {
                id,
                ctx: self.id,
                core,
                op,
                host_addr,
                arm_addr,
                size,
            });
        } else {
            inner.stats.dma_faults += 1;
            inner.dmas.insert(
                id,
                DmaState::Done {
                    ctx: self.id,
                    result: Err(OffloadError::Fault { host_addr, size }),
                },
            );
        }
        Ok(id)
    }

    /// Suspends the handler until DMA `id` completes.
    pub fn wait_dma_finish(&self, id: u64) -> DmaWait {
        DmaWait {
            ctx: self.id,
            id,
            inner: self.inner.clone(),
        }
    }

    /// Sends `size` bytes at `addr` as the response. `size == 0` sends a
    /// status-only response and ignores `addr`.
    pub fn submit_resp(&self, addr: u64, size: u64) -> Result<(), OffloadError> {
        let mut inner = self.inner.borrow_mut();
        let ctx = inner.ctx(self.id)?;
        if ctx.responded {
            return Err(OffloadError::DoubleSubmit(self.id));
        }
        let pending = inner.pending_of(self.id);
        if pending > 0 {
            return Err(OffloadError::OutstandingDma {
                ctx: self.id,
                count: pending,
            });
        }
        let payload = if size == 0 {
            Vec::new()
        } else {
            let base = inner
                .alloc_of(ctx, addr, size)
                .ok_or(OffloadError::NotAllocated { addr, len: size })?;
            let off = (addr - base) as usize;
            inner.arm[&base][off..off + size as usize].to_vec()
        };
        let resp = OffloadResponse {
            ctx: self.id,
            qp: ctx.qp,
            opcode: ctx.opcode,
            core: ctx.core,
            payload,
            status: ResponseStatus::Ok,
        };
        inner.ctxs.get_mut(&self.id).unwrap().responded = true;
        inner.stats.responses += 1;
        inner.responses.push_back(resp);
        Ok(())
    }

    pub fn read_arm(&self, addr: u64, len: u64) -> Result<Vec<u8>, OffloadError> {
        let inner = self.inner.borrow();
        let ctx = inner.ctx(self.id)?;
        let base = inner
            .alloc_of(ctx, addr, len)
            .ok_or(OffloadError::NotAllocated { addr, len })?;
        let off = (addr - base) as usize;
        Ok(inner.arm[&base][off..off + len as usize].to_vec())
    }

    pub fn write_arm(&self, addr: u64, data: &[u8]) -> Result<(), OffloadError> {
        let mut inner = self.inner.borrow_mut();
        let len = data.len() as u64;
        let ctx = inner.ctx(self.id)?;
        let base = inner
            .alloc_of(ctx, addr, len)
            .ok_or(OffloadError::NotAllocated { addr, len })?;
        let off = (addr - base) as usize;
        inner.arm.get_mut(&base).unwrap()[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }
}

pub struct DmaWait {
    ctx: u64,
    id: u64,
    inner: Rc<RefCell<Inner>>,
}

impl Future for DmaWait {
    type Output = Result<(), OffloadError>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut inner = self.inner.borrow_mut();
        match inner.dmas.get_mut(&self.id) {
            Some(DmaState::Pending { ctx, waited }) if *ctx == self.ctx => {
                *waited = true;
                Poll::Pending
            }
            Some(DmaState::Done { ctx, .. }) if *ctx == self.ctx => {
                match inner.dmas.remove(&self.id) {
                    Some(DmaState::Done { result, .. }) => Poll::Ready(result),
                    _ => unreachable!(),
                }
            }
            _ => Poll::Ready(Err(OffloadError::UnknownDma(self.id))),
        }
    }
}

pub type HandlerFuture = Pin<Box<dyn Future<Output = ()>>>;
pub type Handler = Rc<dyn Fn(OffloadCtx) -> HandlerFuture>;

struct Registration {
    qp: u32,
    handler: Handler,
}

struct Seed {
    qp: u32,
    opcode: u8,
    request: Vec<u8>,
}

pub struct OffloadEngine {
    inner: Rc<RefCell<Inner>>,
    handlers: BTreeMap<u8, Registration>,
    tasks: HashMap<u64, HandlerFuture>,
    /// Atomic queues indexed `data_core * engine_cores + engine_core`.
    queues: Vec<(AtomicQueueProducer, AtomicQueueConsumer)>,
    seeds: HashMap<u64, Seed>,
    next_ctx: u64,
    rr: usize,
}

impl OffloadEngine {
    pub fn new(cfg: EngineConfig) -> Result<Self, OffloadError> {
        if cfg.engine_cores == 0 || cfg.data_cores == 0 {
            return Err(OffloadError::ZeroSize);
        }
        let queues = (0..cfg.data_cores * cfg.engine_cores)
            .map(|_| atomic_queue(cfg.queue_depth, 16))
            .collect::<Result<Vec<_>, _>>()?;
        let inner = Inner {
            cfg,
            now: 0,
            host: HostMemory::default(),
            regions: Vec::new(),
            arm: BTreeMap::new(),
            next_arm: 0x2000_0000,
            ctxs: BTreeMap::new(),
            dmas: HashMap::new(),
            next_dma: 0,
            submitted: VecDeque::new(),
            woken: VecDeque::new(),
            responses: VecDeque::new(),
            stats: EngineStats::default(),
        };
        Ok(OffloadEngine {
            inner: Rc::new(RefCell::new(inner)),
            handlers: BTreeMap::new(),
            tasks: HashMap::new(),
            queues,
            seeds: HashMap::new(),
            next_ctx: 1,
            rr: 0,
        })
    }

    pub fn register_opcode(
        &mut self,
        opcode: u8,
        qp: u32,
        handler: Handler,
    ) -> Result<(), OffloadError> {
        if opcode < CUSTOM_OPCODE_BASE {
            return Err(OffloadError::ReservedOpcode(opcode));
        }
        if self.handlers.contains_key(&opcode) {
            return Err(OffloadError::DuplicateOpcode(opcode));
        }
        self.handlers.insert(opcode, Registration { qp, handler });
        Ok(())
    }

    /// Grants the engine DMA access to `host_addr..host_addr+size`.
    pub fn register_dma_region(
        &mut self,
        host_addr: u64,
        size: u64,
    ) -> Result<DmaRegion, OffloadError> {
        if size == 0 {
            return Err(OffloadError::ZeroSize);
        }
        let mut inner = self.inner.borrow_mut();
        let end = host_addr.checked_add(size).ok_or(OffloadError::ZeroSize)?;
        if inner
            .regions
            .iter()
            .any(|r| host_addr < r.host_addr + r.size && r.host_addr < end)
        {
            return Err(OffloadError::Overlap { host_addr });
        }
        let r = DmaRegion { host_addr, size };
        inner.regions.push(r);
        Ok(r)
    }

    pub fn is_registered(&self, opcode: u8, qp: u32) -> bool {
        self.handlers.get(&opcode).is_some_and(|r| r.qp == qp)
    }

    pub fn host_write(&mut self, addr: u64, data: &[u8]) {
        self.inner.borrow_mut().host.write(addr, data);
    }

    pub fn host_read(&self, addr: u64, len: usize) -> Vec<u8> {
        self.inner.borrow().host.read(addr, len)
    }

    /// Stack side: hands a received request from `data_core` to an engine
    /// core. Returns the new context id.
    pub fn deliver(
        &mut self,
        data_core: usize,
        opcode: u8,
        qp: u32,
        request: Vec<u8>,
    ) -> Result<u64, OffloadError> {
        if !self.is_registered(opcode, qp) {
            return Err(OffloadError::Unregistered { opcode, qp });
        }
        let engine_cores = self.inner.borrow().cfg.engine_cores;
        let core = self.rr % engine_cores;
        self.rr += 1;
        let id = self.next_ctx;
        self.next_ctx += 1;
        let q = (data_core % self.inner.borrow().cfg.data_cores) * engine_cores + core;
        self.queues[q]
            .0
            .try_produce(&[PipeElement::raw(&id.to_le_bytes())])?;
        self.seeds.insert(
            id,
            Seed {
                qp,
                opcode,
                request,
            },
        );
        Ok(id)
    }

    /// Engine side: starts queued requests and resumes woken handlers until
    /// every task is blocked on a DMA or finished.
    pub fn poll(&mut self, now: Nanos) {
        self.inner.borrow_mut().now = now;
        let engine_cores = self.inner.borrow().cfg.engine_cores;
        for q in 0..self.queues.len() {
            while let Some(e) = self.queues[q].1.consume() {
                let id = u64::from_le_bytes(e.body[..8].try_into().unwrap());
                let seed = self.seeds.remove(&id).expect("queued context has a seed");
                let handler = self.handlers[&seed.opcode].handler.clone();
                {
                    let mut inner = self.inner.borrow_mut();
                    inner.ctxs.insert(
                        id,
                        CtxState {
                            qp: seed.qp,
                            opcode: seed.opcode,
                            core: q % engine_cores,
                            request: seed.request,
                            allocs: Vec::new(),
                            responded: false,
                            started: now,
                        },
                    );
                    inner.stats.invocations += 1;
                    inner.woken.push_back(id);
                }
                let fut = handler(OffloadCtx {
                    id,
                    inner: self.inner.clone(),
                });
                self.tasks.insert(id, fut);
            }
        }
        let mut cx = Context::from_waker(Waker::noop());
        loop {
            let next = self.inner.borrow_mut().woken.pop_front();
            let Some(id) = next else { break };
            let Some(task) = self.tasks.get_mut(&id) else {
                continue;
            };
            if task.as_mut().poll(&mut cx).is_ready() {
                self.tasks.remove(&id);
                let mut inner = self.inner.borrow_mut();
                let responded = inner.ctxs.get(&id).is_some_and(|c| c.responded);
                inner.retire(id, (!responded).then_some(ResponseStatus::NoResponse));
            }
        }
    }

    pub fn take_dma_requests(&mut self) -> Vec<DmaRequest> {
        self.inner.borrow_mut().submitted.drain(..).collect()
    }

    /// Driver reports that DMA `id` finished; data moves now and the waiting
    /// handler becomes runnable. Completions for retired contexts are ignored.
    pub fn complete_dma(&mut self, req: &DmaRequest) {
        let mut inner = self.inner.borrow_mut();
        let waited = match inner.dmas.get(&req.id) {
            Some(DmaState::Pending { waited, .. }) => *waited,
            _ => return,
        };
        match req.op {
            DmaOp::Read => {
                let data = inner.host.read(req.host_addr, req.size as usize);
                write_arm_raw(&mut inner, req.arm_addr, &data);
            }
            DmaOp::Write => {
                let data = read_arm_raw(&inner, req.arm_addr, req.size);
                inner.host.write(req.host_addr, &data);
            }
        }
        inner.dmas.insert(
            req.id,
            DmaState::Done {
                ctx: req.ctx,
                result: Ok(()),
            },
        );
        if waited {
            inner.woken.push_back(req.ctx);
        }
    }

    pub fn take_responses(&mut self) -> Vec<OffloadResponse> {
        self.inner.borrow_mut().responses.drain(..).collect()
    }

    /// Retires contexts older than the configured timeout with an error response.
    pub fn expire(&mut self, now: Nanos) -> usize {
        let mut inner = self.inner.borrow_mut();
        let limit = inner.cfg.ctx_timeout;
        let old: Vec<u64> = inner
            .ctxs
            .iter()
            .filter(|(_, c)| !c.responded && now.saturating_sub(c.started) >= limit)
            .map(|(&id, _)| id)
            .collect();
        for &id in &old {
            self.tasks.remove(&id);
            inner.retire(id, Some(ResponseStatus::TimedOut));
        }
        old.len()
    }

    /// Runs every DMA to completion immediately until nothing is runnable.
    pub fn run_until_idle(&mut self, now: Nanos) {
        loop {
            self.poll(now);
            let reqs = self.take_dma_requests();
            if reqs.is_empty() {
                break;
            }
            for r in &reqs {
                self.complete_dma(r);
            }
        }
    }

    pub fn live_contexts(&self) -> usize {
        self.inner.borrow().ctxs.len()
    }

    pub fn stats(&self) -> EngineStats {
        self.inner.borrow().stats.clone()
    }

    pub fn config(&self) -> EngineConfig {
        self.inner.borrow().cfg.clone()
    }
}

fn write_arm_raw(inner: &mut Inner, addr: u64, data: &[u8]) {
    if let Some((&base, buf)) = inner.arm.range_mut(..=addr).next_back() {
        let off = (addr - base) as usize;
        if off + data.len() <= buf.len() {
            buf[off..off + data.len()].copy_from_slice(data);
        }
    }
}

fn read_arm_raw(inner: &Inner, addr: u64, len: u64) -> Vec<u8> {
    inner
        .arm
        .range(..=addr)
        .next_back()
        .and_then(|(&base, buf)| buf.get((addr - base) as usize..(addr - base + len) as usize))
        .map(|s| s.to_vec())
        .unwrap_or_default()
}

/// Wraps an async closure as a [`Handler`].
pub fn handler<F, Fut>(f: F) -> Handler
where
    F: Fn(OffloadCtx) -> Fut + 'static,
    Fut: Future<Output = ()> + 'static,
{
    Rc::new(move |ctx| Box::pin(f(ctx)) as HandlerFuture)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> OffloadEngine {
        let mut e = OffloadEngine::new(EngineConfig::new(2, 2)).unwrap();
        e.register_dma_region(0x1000, 0x1000).unwrap();
        e
    }

    fn echo() -> Handler {
        handler(|ctx: OffloadCtx| async move {
            let req = ctx.request();
            let a = ctx.alloc_resp(req.len() as u64).unwrap();
            ctx.write_arm(a, &req).unwrap();
            ctx.submit_resp(a, req.len() as u64).unwrap();
        })
    }

    #[test]
    fn registered_opcode_invokes_handler_once() {
        let mut e = engine();
        e.register_opcode(0xC0, 7, echo()).unwrap();
        e.deliver(0, 0xC0, 7, b"hello".to_vec()).unwrap();
        e.run_until_idle(0);
        let r = e.take_responses();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].payload, b"hello");
        assert_eq!(r[0].status, ResponseStatus::Ok);
        assert_eq!(e.stats().invocations, 1);
        assert_eq!(e.live_contexts(), 0);
    }

    #[test]
    fn registration_rules() {
        let mut e = engine();
        assert_eq!(
            e.register_opcode(1, 7, echo()),
            Err(OffloadError::ReservedOpcode(1))
        );
        e.register_opcode(0xC0, 7, echo()).unwrap();
        assert_eq!(
            e.register_opcode(0xC0, 8, echo()),
            Err(OffloadError::DuplicateOpcode(0xC0))
        );
        assert!(matches!(
            e.deliver(0, 0xC1, 7, vec![]),
            Err(OffloadError::Unregistered { .. })
        ));
        assert!(matches!(
            e.deliver(0, 0xC0, 8, vec![]),
            Err(OffloadError::Unregistered { .. })
        ));
        assert_eq!(e.stats().invocations, 0);
        assert!(matches!(
            e.register_dma_region(0x1800, 16),
            Err(OffloadError::Overlap { .. })
        ));
        assert_eq!(
            e.register_dma_region(0x9000, 0),
            Err(OffloadError::ZeroSize)
        );
    }

    #[test]
    fn alloc_rules() {
        let mut e = engine();
        let out = Rc::new(RefCell::new(Vec::new()));
        let o = out.clone();
        e.register_opcode(
            0x90,
            1,
            handler(move |ctx: OffloadCtx| {
                let o = o.clone();
                async move {
                    let a = ctx.alloc_resp(64).unwrap();
                    let b = ctx.alloc_resp(64).unwrap();
                    o.borrow_mut().push(a.abs_diff(b) >= 64);
                    o.borrow_mut()
                        .push(ctx.alloc_resp(0) == Err(OffloadError::ZeroSize));
                    o.borrow_mut().push(matches!(
                        ctx.alloc_resp(2 << 20),
                        Err(OffloadError::RespCap { .. })
                    ));
                    ctx.submit_resp(0, 0).unwrap();
                    o.borrow_mut()
                        .push(ctx.submit_resp(0, 0) == Err(OffloadError::DoubleSubmit(ctx.id())));
                }
            }),
        )
        .unwrap();
        e.deliver(0, 0x90, 1, vec![]).unwrap();
        e.run_until_idle(0);
        assert_eq!(*out.borrow(), vec![true, true, true, true]);
        let r = e.take_responses();
        assert_eq!(r.len(), 1);
        assert!(r[0].payload.is_empty());
        assert_eq!(e.live_contexts(), 0);
    }

    #[test]
    fn dma_read_write_and_fault() {
        let mut e = engine();
        e.host_write(0x1100, &[9; 64]);
        e.register_opcode(
            0x91,
            1,
            handler(|ctx: OffloadCtx| async move {
                let a = ctx.alloc_resp(64).unwrap();
                let id = ctx.submit_dma(DmaOp::Read, 0x1100, a, 64).unwrap();
                ctx.wait_dma_finish(id).await.unwrap();
                let w = ctx.submit_dma(DmaOp::Write, 0x1200, a, 64).unwrap();
                ctx.wait_dma_finish(w).await.unwrap();
                let bad = ctx.submit_dma(DmaOp::Write, 0x8000, a, 64).unwrap();
                let st = ctx.wait_dma_finish(bad).await;
                assert!(matches!(st, Err(OffloadError::Fault { .. })));
                ctx.submit_resp(a, 64).unwrap();
            }),
        )
        .unwrap();
        e.deliver(1, 0x91, 1, vec![]).unwrap();
        e.run_until_idle(0);
        assert_eq!(e.host_read(0x1200, 64), vec![9; 64]);
        assert_eq!(e.take_responses()[0].payload, vec![9; 64]);
        assert_eq!(e.stats().dma_faults, 1);
    }

    #[test]
    fn response_blocked_by_inflight_dma_and_missing_response_retired() {
        let mut e = engine();
        e.register_opcode(
            0x92,
            1,
            handler(|ctx: OffloadCtx| async move {
                let a = ctx.alloc_resp(8).unwrap();
                let _id = ctx.submit_dma(DmaOp::Read, 0x1000, a, 8).unwrap();
                assert!(matches!(
                    ctx.submit_resp(a, 8),
                    Err(OffloadError::OutstandingDma { count: 1, .. })
                ));
            }),
        )
        .unwrap();
        e.deliver(0, 0x92, 1, vec![]).unwrap();
        e.poll(0);
        let r = e.take_responses();
        assert_eq!(r[0].status, ResponseStatus::NoResponse);
        assert_eq!(e.live_contexts(), 0);
        // late completion of a retired context's DMA is ignored
        for req in e.take_dma_requests() {
            e.complete_dma(&req);
        }
    }

    #[test]
    fn stuck_handler_times_out() {
        let mut e = engine();
        e.register_opcode(
            0x93,
            1,
            handler(|ctx: OffloadCtx| async move {
                let a = ctx.alloc_resp(8).unwrap();
                let id = ctx.submit_dma(DmaOp::Read, 0x1000, a, 8).unwrap();
                let _ = ctx.wait_dma_finish(id).await;
                ctx.submit_resp(a, 8).unwrap();
            }),
        )
        .unwrap();
        e.deliver(0, 0x93, 1, vec![]).unwrap();
        e.poll(0);
        assert_eq!(e.live_contexts(), 1);
        assert_eq!(e.expire(DEFAULT_CTX_TIMEOUT - 1), 0);
        assert_eq!(e.expire(DEFAULT_CTX_TIMEOUT), 1);
        assert_eq!(e.take_responses()[0].status, ResponseStatus::TimedOut);
        assert_eq!(e.live_contexts(), 0);
    }
}
