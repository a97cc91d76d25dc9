//! Shared send queues: per-context pipes on every data core, least-loaded
//! SQ placement and per-core active-SQ tables.

use std::collections::{BTreeMap, BTreeSet};

use super::TxError;

#[derive(Debug, Clone)]
struct SqInfo {
    context_id: u32,
    core: usize,
    unfinished: u64,
}

#[derive(Debug)]
pub struct SqMap {
    cores: usize,
    bound: Vec<usize>,
    active: Vec<BTreeSet<u32>>,
    sqs: BTreeMap<u32, SqInfo>,
    /// Context id -> number of pipes (one per data core).
    contexts: BTreeMap<u32, usize>,
    next_sq: u32,
}

impl SqMap {
    pub fn new(cores: usize) -> Self {
        assert!(cores > 0);
        SqMap {
            cores,
            bound: vec![0; cores],
            active: vec![BTreeSet::new(); cores],
            sqs: BTreeMap::new(),
            contexts: BTreeMap::new(),
            next_sq: 0,
        }
    }

    pub fn cores(&self) -> usize {
        self.cores
    }

    pub fn create_sq(&mut self, context_id: u32) -> u32 {
        self.contexts.entry(context_id).or_insert(self.cores);
        let core = (0..self.cores).min_by_key(|&c| (self.bound[c], c)).unwrap();
        self.bound[core] += 1;
        let id = self.next_sq;
        self.next_sq += 1;
        self.sqs.insert(
            id,
            SqInfo {
                context_id,
                core,
                unfinished: 0,
            },
        );
        id
    }

    pub fn destroy_sq(&mut self, sq: u32) -> Result<(), TxError> {
        let info = self.sqs.remove(&sq).ok_or(TxError::UnknownSq(sq))?;
        self.bound[info.core] -= 1;
        self.active[info.core].remove(&sq);
        Ok(())
    }

    pub fn core_of(&self, sq: u32) -> Result<usize, TxError> {
        self.sqs
            .get(&sq)
            .map(|i| i.core)
            .ok_or(TxError::UnknownSq(sq))
    }

    pub fn context_of(&self, sq: u32) -> Result<u32, TxError> {
        self.sqs
            .get(&sq)
            .map(|i| i.context_id)
            .ok_or(TxError::UnknownSq(sq))
    }

    pub fn pipes_total(&self, context_id: u32) -> usize {
        self.contexts.get(&context_id).copied().unwrap_or(0)
    }

    pub fn bound_per_core(&self) -> &[usize] {
        &self.bound
    }

    /// A request was consumed from the SQ's pipe.
    pub fn submit(&mut self, sq: u32) -> Result<(), TxError> {
        let info = self.sqs.get_mut(&sq).ok_or(TxError::UnknownSq(sq))?;
        info.unfinished += 1;
        self.active[info.core].insert(sq);
        Ok(())
    }

    /// `n` requests finished; the SQ leaves the active table when none remain.
    pub fn finish(&mut self, sq: u32, n: u64) -> Result<(), TxError> {
        let info = self.sqs.get_mut(&sq).ok_or(TxError::UnknownSq(sq))?;
        info.unfinished = info.unfinished.saturating_sub(n);
        if info.unfinished == 0 {
            self.active[info.core].remove(&sq);
        }
        Ok(())
    }

    pub fn unfinished(&self, sq: u32) -> u64 {
        self.sqs.get(&sq).map_or(0, |i| i.unfinished)
    }

    pub fn is_active(&self, sq: u32) -> bool {
        self.sqs
            .get(&sq)
            .is_some_and(|i| self.active[i.core].contains(&sq))
    }

    pub fn active_on(&self, core: usize) -> &BTreeSet<u32> {
        &self.active[core]
    }

    /// Work done by one event-loop pass of `core`: one poll per context
    /// pipe plus one visit per active SQ.
    pub fn poll_ops(&self, core: usize) -> usize {
        self.contexts.len() + self.active[core].len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_loaded_with_lowest_id_tiebreak() {
        let mut m = SqMap::new(4);
        let cores: Vec<usize> = (0..8)
            .map(|_| {
                let s = m.create_sq(1);
                m.core_of(s).unwrap()
            })
            .collect();
        assert_eq!(cores, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(m.bound_per_core(), &[2, 2, 2, 2]);
        assert_eq!(m.pipes_total(1), 4);
    }

    #[test]
    fn active_table_tracks_unfinished_work() {
        let mut m = SqMap::new(2);
        let s = m.create_sq(0);
        assert!(!m.is_active(s));
        m.submit(s).unwrap();
        m.submit(s).unwrap();
        m.finish(s, 1).unwrap();
        assert!(m.is_active(s));
        m.finish(s, 1).unwrap();
        assert!(!m.is_active(s));
    }

    #[test]
    fn poll_cost_independent_of_sq_count() {
        let mut m = SqMap::new(16);
        for _ in 0..2000 {
            m.create_sq(7);
        }
        assert_eq!(m.poll_ops(3), 1);
    }
}
