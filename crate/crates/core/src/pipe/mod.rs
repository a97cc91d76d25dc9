//! Lossless single-producer/single-consumer notification ring.
//!
//! Every slot is one 64-byte element whose flag bit is compared against the
//! consumer's phase. The phase of wrap `w` is `w % 2 == 0`, so a zeroed
//! buffer reads as empty and each wrap flips the expected flag.
//!
//! Two transports share the index logic in [`ProducerCursor`] and
//! [`ConsumerCursor`]: [`DmaPipe`] (simulated, one DMA per batch) and
//! [`shm`] (real threads over shared memory).

pub mod bench;
pub mod element;
pub mod rqe;
pub mod shm;

pub use element::{ElementKind, PipeElement, ELEMENT_BYTES};

use thiserror::Error;

pub const DEFAULT_COUNTER_PERIOD: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipeError {
    #[error("pipe full: {free} free slots, batch of {needed}")]
    Full { free: u64, needed: u64 },
    #[error("batch of {0} exceeds pipe depth")]
    BatchTooLarge(usize),
    #[error("unknown element kind in header byte {0:#04x}")]
    BadKind(u8),
    #[error("expected {expected:?} element, got {got:?}")]
    WrongKind {
        expected: ElementKind,
        got: ElementKind,
    },
    #[error("invalid value in field {0}")]
    BadField(&'static str),
    #[error("depth must be a power of two, got {0}")]
    Depth(usize),
}

pub fn check_depth(depth: usize) -> Result<(), PipeError> {
    if depth == 0 || !depth.is_power_of_two() {
        return Err(PipeError::Depth(depth));
    }
    Ok(())
}

/// Flag value written for absolute index `idx`.
pub fn phase_of(idx: u64, depth: usize) -> bool {
    (idx / depth as u64) % 2 == 0
}

pub fn slot_of(idx: u64, depth: usize) -> usize {
    (idx & (depth as u64 - 1)) as usize
}

/// Producer-side bookkeeping: next index, last known consumer count and
/// the periodic counter-read schedule.
#[derive(Debug, Clone)]
pub struct ProducerCursor {
    depth: usize,
    index: u64,
    known_consumed: u64,
    period: u64,
    since_read: u64,
    counter_reads: u64,
}

impl ProducerCursor {
    pub fn new(depth: usize, period: u64) -> Self {
        assert!(period > 0);
        ProducerCursor {
            depth,
            index: 0,
            known_consumed: 0,
            period,
            since_read: 0,
            counter_reads: 0,
        }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn known_consumed(&self) -> u64 {
        self.known_consumed
    }

    pub fn free(&self) -> u64 {
        self.depth as u64 - (self.index - self.known_consumed)
    }

    pub fn counter_reads(&self) -> u64 {
        self.counter_reads
    }

    /// Reserves `n` slots, returning the first absolute index.
    pub fn reserve(&mut self, n: usize) -> Result<u64, PipeError> {
        if n > self.depth {
            return Err(PipeError::BatchTooLarge(n));
        }
        if self.free() < n as u64 {
            return Err(PipeError::Full {
                free: self.free(),
                needed: n as u64,
            });
        }
        let first = self.index;
        self.index += n as u64;
        self.since_read += n as u64;
        Ok(first)
    }

    /// True once `period` elements were produced since the last read.
    pub fn read_due(&self) -> bool {
        self.since_read >= self.period
    }

    pub fn record_read(&mut self, observed: u64) {
        debug_assert!(observed <= self.index);
        self.known_consumed = self.known_consumed.max(observed);
        self.since_read = self.since_read.saturating_sub(self.period);
        self.counter_reads += 1;
    }
}

#[derive(Debug, Clone)]
pub struct ConsumerCursor {
    depth: usize,
    index: u64,
}

impl ConsumerCursor {
    pub fn new(depth: usize) -> Self {
        ConsumerCursor { depth, index: 0 }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn slot(&self) -> usize {
        slot_of(self.index, self.depth)
    }

    pub fn phase(&self) -> bool {
        phase_of(self.index, self.depth)
    }

    pub fn advance(&mut self) {
        self.index += 1;
    }
}

/// A batch written into the producer buffer and waiting to be copied to
/// the consumer buffer by one DMA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipeDma {
    pub first: u64,
    pub count: usize,
}

impl PipeDma {
    pub fn bytes(&self) -> u64 {
        (self.count * ELEMENT_BYTES) as u64
    }
}

/// Simulated pipe. The producer stages encoded elements locally; data
/// becomes visible to the consumer only when the caller completes the
/// corresponding [`PipeDma`]. DMAs may complete in any order.
#[derive(Debug, Clone)]
pub struct DmaPipe {
    depth: usize,
    producer: ProducerCursor,
    staged: Vec<[u8; ELEMENT_BYTES]>,
    consumer: ConsumerCursor,
    ring: Vec<[u8; ELEMENT_BYTES]>,
    consumer_counter: u64,
    dmas_issued: u64,
    dma_bytes: u64,
}

impl DmaPipe {
    pub fn new(depth: usize, counter_period: u64) -> Result<Self, PipeError> {
        check_depth(depth)?;
        Ok(DmaPipe {
            depth,
            producer: ProducerCursor::new(depth, counter_period),
            staged: vec![[0; ELEMENT_BYTES]; depth],
            consumer: ConsumerCursor::new(depth),
            ring: vec![[0; ELEMENT_BYTES]; depth],
            consumer_counter: 0,
            dmas_issued: 0,
            dma_bytes: 0,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn producer(&self) -> &ProducerCursor {
        &self.producer
    }

    pub fn consumer_index(&self) -> u64 {
        self.consumer.index()
    }

    pub fn dmas_issued(&self) -> u64 {
        self.dmas_issued
    }

    pub fn dma_bytes(&self) -> u64 {
        self.dma_bytes
    }

    /// Stages a batch; the caller charges one DMA of `bytes()` and calls
    /// [`DmaPipe::complete`] when it lands.
    pub fn produce(&mut self, batch: &[PipeElement]) -> Result<PipeDma, PipeError> {
        let first = self.producer.reserve(batch.len())?;
        for (i, e) in batch.iter().enumerate() {
            let idx = first + i as u64;
            self.staged[slot_of(idx, self.depth)] = e.encode(phase_of(idx, self.depth));
        }
        let dma = PipeDma {
            first,
            count: batch.len(),
        };
        self.dmas_issued += 1;
        self.dma_bytes += dma.bytes();
        Ok(dma)
    }

    pub fn complete(&mut self, dma: &PipeDma) {
        for idx in dma.first..dma.first + dma.count as u64 {
            let s = slot_of(idx, self.depth);
            self.ring[s] = self.staged[s];
        }
    }

    pub fn consume(&mut self) -> Option<PipeElement> {
        let raw = &self.ring[self.consumer.slot()];
        if raw[0] & 1 != self.consumer.phase() as u8 {
            return None;
        }
        let (_, e) = PipeElement::decode(raw).expect("producer wrote a valid element");
        self.consumer.advance();
        self.consumer_counter += 1;
        Some(e)
    }

    /// One DMA read of the consumer counter.
    pub fn read_consumer_counter(&mut self) -> u64 {
        let c = self.consumer_counter;
        self.producer.record_read(c);
        c
    }

    /// Produce with the saturating-producer policy: refresh the counter when
    /// full and after every `n` elements. Returns `Full` only if the
    /// refreshed count still leaves too little room (the caller retries).
    pub fn produce_blocking(&mut self, batch: &[PipeElement]) -> Result<PipeDma, PipeError> {
        let dma = match self.produce(batch) {
            Err(PipeError::Full { .. }) => {
                self.read_consumer_counter();
                self.produce(batch)?
            }
            r => r?,
        };
        if self.producer.read_due() {
            self.read_consumer_counter();
        }
        Ok(dma)
    }
}
