//! Shared-memory transport for the notification ring.
//!
//! Each slot is eight `AtomicU64` words on its own cacheline. The producer
//! stores words 1..8 relaxed, then word 0 (which holds the flag) with
//! release ordering. The consumer loads word 0 with acquire ordering and
//! publishes its counter with release ordering after reading the body, so
//! the producer never reuses a slot the consumer is still reading.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{
    check_depth, phase_of, slot_of, ConsumerCursor, PipeElement, PipeError, ProducerCursor,
    ELEMENT_BYTES,
};

#[repr(align(64))]
struct Slot([AtomicU64; 8]);

#[repr(align(64))]
struct Counter(AtomicU64);

struct Shared {
    depth: usize,
    slots: Box<[Slot]>,
    consumed: Counter,
}

pub struct ShmProducer {
    shared: Arc<Shared>,
    cursor: ProducerCursor,
}

pub struct ShmConsumer {
    shared: Arc<Shared>,
    cursor: ConsumerCursor,
}

pub fn shm_pipe(
    depth: usize,
    counter_period: u64,
) -> Result<(ShmProducer, ShmConsumer), PipeError> {
    check_depth(depth)?;
    let slots = (0..depth).map(|_| Slot(Default::default())).collect();
    let shared = Arc::new(Shared {
        depth,
        slots,
        consumed: Counter(AtomicU64::new(0)),
    });
    Ok((
        ShmProducer {
            shared: shared.clone(),
            cursor: ProducerCursor::new(depth, counter_period),
        },
        ShmConsumer {
            shared,
            cursor: ConsumerCursor::new(depth),
        },
    ))
}

fn words(raw: &[u8; ELEMENT_BYTES]) -> [u64; 8] {
    std::array::from_fn(|i| u64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap()))
}

impl ShmProducer {
    pub fn counter_reads(&self) -> u64 {
        self.cursor.counter_reads()
    }

    pub fn read_consumer_counter(&mut self) -> u64 {
        let c = self.shared.consumed.0.load(Ordering::Acquire);
        self.cursor.record_read(c);
        c
    }

    pub fn try_produce(&mut self, batch: &[PipeElement]) -> Result<(), PipeError> {
        let first = match self.cursor.reserve(batch.len()) {
            Err(PipeError::Full { .. }) => {
                self.read_consumer_counter();
                self.cursor.reserve(batch.len())?
            }
            r => r?,
        };
        let depth = self.shared.depth;
        for (i, e) in batch.iter().enumerate() {
            let idx = first + i as u64;
            let w = words(&e.encode(phase_of(idx, depth)));
            let slot = &self.shared.slots[slot_of(idx, depth)].0;
            for k in 1..8 {
                slot[k].store(w[k], Ordering::Relaxed);
            }
            slot[0].store(w[0], Ordering::Release);
        }
        if self.cursor.read_due() {
            self.read_consumer_counter();
        }
        Ok(())
    }

    /// Spins (yielding) until the batch fits.
    pub fn produce(&mut self, batch: &[PipeElement]) -> Result<(), PipeError> {
        loop {
            match self.try_produce(batch) {
                Err(PipeError::Full { .. }) => std::thread::yield_now(),
                r => return r,
            }
        }
    }
}

impl ShmConsumer {
    pub fn index(&self) -> u64 {
        self.cursor.index()
    }

    pub fn consume(&mut self) -> Option<PipeElement> {
        let slot = &self.shared.slots[self.cursor.slot()].0;
        let w0 = slot[0].load(Ordering::Acquire);
        if (w0 & 1 == 1) != self.cursor.phase() {
            return None;
        }
        let mut raw = [0u8; ELEMENT_BYTES];
        raw[..8].copy_from_slice(&w0.to_le_bytes());
        for k in 1..8 {
            raw[k * 8..k * 8 + 8].copy_from_slice(&slot[k].load(Ordering::Relaxed).to_le_bytes());
        }
        let (_, e) = PipeElement::decode(&raw).expect("producer wrote a valid element");
        self.cursor.advance();
        self.shared
            .consumed
            .0
            .store(self.cursor.index(), Ordering::Release);
        Some(e)
    }
}
