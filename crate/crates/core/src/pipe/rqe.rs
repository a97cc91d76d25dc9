//! Grouping of receive entries into four-per-element batches.

use super::element::{rqe_group, Rqe, RQES_PER_GROUP};
use super::PipeElement;
use crate::sim::{Nanos, US};

pub const DEFAULT_GROUP_TIMEOUT: Nanos = 10 * US;

/// Collects RQEs; a group is emitted when four are pending, when the oldest
/// pending entry is `timeout` old, or on an explicit flush.
#[derive(Debug, Clone)]
pub struct RqeBatcher {
    pending: Vec<Rqe>,
    oldest: Option<Nanos>,
    timeout: Nanos,
    groups: u64,
    partial_groups: u64,
}

impl Default for RqeBatcher {
    fn default() -> Self {
        Self::new(DEFAULT_GROUP_TIMEOUT)
    }
}

impl RqeBatcher {
    pub fn new(timeout: Nanos) -> Self {
        RqeBatcher {
            pending: Vec::new(),
            oldest: None,
            timeout,
            groups: 0,
            partial_groups: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn groups(&self) -> u64 {
        self.groups
    }

    pub fn partial_groups(&self) -> u64 {
        self.partial_groups
    }

    /// Time at which the pending partial group must be flushed.
    pub fn deadline(&self) -> Option<Nanos> {
        self.oldest.map(|t| t + self.timeout)
    }

    pub fn push(&mut self, rqe: Rqe, now: Nanos) -> Option<PipeElement> {
        if self.pending.is_empty() {
            self.oldest = Some(now);
        }
        self.pending.push(rqe);
        if self.pending.len() == RQES_PER_GROUP {
            return self.flush();
        }
        None
    }

    pub fn poll(&mut self, now: Nanos) -> Option<PipeElement> {
        match self.deadline() {
            Some(d) if now >= d => self.flush(),
            _ => None,
        }
    }

    pub fn flush(&mut self) -> Option<PipeElement> {
        if self.pending.is_empty() {
            return None;
        }
        let g = rqe_group(&self.pending);
        if self.pending.len() < RQES_PER_GROUP {
            self.partial_groups += 1;
        }
        self.groups += 1;
        self.pending.clear();
        self.oldest = None;
        Some(g)
    }
}
