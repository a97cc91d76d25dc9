use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Nanos, SimError};

/// A queued continuation. Ordered by `(fire_time, sequence)`.
#[derive(Debug)]
pub struct SimEvent<E> {
    pub fire_time: Nanos,
    pub sequence: u64,
    pub action: E,
}

impl<E> PartialEq for SimEvent<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.sequence == other.sequence
    }
}

impl<E> Eq for SimEvent<E> {}

impl<E> PartialOrd for SimEvent<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for SimEvent<E> {
    // Reversed so that the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .cmp(&self.fire_time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

/// Deterministic event queue with an integer-nanosecond clock.
#[derive(Debug)]
pub struct EventQueue<E> {
    now: Nanos,
    next_seq: u64,
    heap: BinaryHeap<SimEvent<E>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Queues `action` at `fire_time`, assigning the next sequence number.
    pub fn schedule(&mut self, fire_time: Nanos, action: E) -> Result<u64, SimError> {
        if fire_time < self.now {
            return Err(SimError::Causality {
                now: self.now,
                fire_time,
            });
        }
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent {
            fire_time,
            sequence,
            action,
        });
        Ok(sequence)
    }

    /// Queues an already-sequenced event (used by tests of the tiebreak rule).
    pub fn schedule_event(&mut self, event: SimEvent<E>) -> Result<(), SimError> {
        if event.fire_time < self.now {
            return Err(SimError::Causality {
                now: self.now,
                fire_time: event.fire_time,
            });
        }
        self.next_seq = self.next_seq.max(event.sequence + 1);
        self.heap.push(event);
        Ok(())
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.heap.peek().map(|e| e.fire_time)
    }

    /// Pops the earliest event if it fires no later than `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: Nanos) -> Option<SimEvent<E>> {
        if self.heap.peek()?.fire_time > limit {
            return None;
        }
        let ev = self.heap.pop()?;
        self.now = ev.fire_time;
        Some(ev)
    }

    pub fn advance_to(&mut self, t: Nanos) {
        debug_assert!(t >= self.now);
        self.now = t;
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
