//! Reference models used as test oracles. They share no code with the
//! library beyond plain input types.

#![allow(dead_code)]

pub mod cache;
pub mod ring;
pub mod transport;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use nicstack::transport::FaultAction;

// ---------------------------------------------------------------------------
// Go-back-N replay

pub struct GbnParams {
    pub rate_gbps: f64,
    pub one_way_ns: u64,
    pub window: usize,
    pub rto_min_ns: u64,
    pub rto_mult: f64,
    pub header_bytes: u64,
}

#[derive(Debug, Default, PartialEq)]
pub struct GbnReplay {
    pub transmissions: u64,
    pub retransmissions: u64,
    pub timeouts: u64,
    /// PSNs in the order the receiver accepted them.
    pub accepted: Vec<u32>,
}

#[derive(Debug)]
enum Ev {
    TxFree,
    Arrive(u32),
    Ack(u32),
    Nak(u32),
    Timer(u64),
}

struct Sender {
    base: u32,
    next_new: u32,
    cursor: u32,
    first_tx: Vec<u64>,
    resent: Vec<bool>,
    srtt: Option<f64>,
    deadline: Option<u64>,
    rto_min: u64,
    rto_mult: f64,
}

impl Sender {
    fn rto(&self) -> u64 {
        self.srtt
            .map_or(0, |s| (s * self.rto_mult).ceil() as u64)
            .max(self.rto_min)
    }

    fn in_flight(&self) -> bool {
        self.base < self.next_new
    }

    fn retire_through(&mut self, psn: u32, now: u64) {
        if !self.in_flight() || psn < self.base {
            return;
        }
        if psn < self.next_new && !self.resent[psn as usize] {
            let s = (now - self.first_tx[psn as usize]) as f64;
            self.srtt = Some(self.srtt.map_or(s, |old| 0.875 * old + 0.125 * s));
        }
        self.base = (psn + 1).min(self.next_new);
        self.cursor = self.cursor.max(self.base);
        self.deadline = if self.in_flight() {
            Some(now + self.rto())
        } else {
            None
        };
    }
}

/// Replays one go-back-N sender and receiver over a serializing link.
/// PSNs start at 0 and `lens[psn]` is the payload size of that packet.
/// Sender rules: a cumulative ACK retires everything up to it; a NAK for
/// `e` retires up to `e - 1` and rewinds to `e`; a timeout rewinds to the
/// oldest unacked packet. The receiver ACKs in-order packets, re-ACKs old
/// ones and NAKs the first gap once until it is filled.
pub fn gbn_replay(
    lens: &[u32],
    p: &GbnParams,
    fault: impl Fn(u32, u32) -> FaultAction,
) -> GbnReplay {
    let n = lens.len() as u32;
    let mut out = GbnReplay::default();
    let mut heap: BinaryHeap<Reverse<(u64, u64)>> = BinaryHeap::new();
    let mut evs: HashMap<u64, Ev> = HashMap::new();
    let mut seq = 0u64;
    let mut push =
        |heap: &mut BinaryHeap<Reverse<(u64, u64)>>, evs: &mut HashMap<u64, Ev>, t: u64, e: Ev| {
            heap.push(Reverse((t, seq)));
            evs.insert(seq, e);
            seq += 1;
        };
    let mut s = Sender {
        base: 0,
        next_new: 0,
        cursor: 0,
        first_tx: vec![0; lens.len()],
        resent: vec![false; lens.len()],
        srtt: None,
        deadline: None,
        rto_min: p.rto_min_ns,
        rto_mult: p.rto_mult,
    };
    let mut expected = 0u32;
    let mut nak_sent = false;
    let mut attempts: HashMap<u32, u32> = HashMap::new();
    let mut busy = true;
    let mut free_at = 0u64;
    let mut armed: Option<u64> = None;

    push(&mut heap, &mut evs, 0, Ev::TxFree);
    while let Some(Reverse((now, id))) = heap.pop() {
        let ev = evs.remove(&id).unwrap();
        let mut kick = false;
        match ev {
            Ev::TxFree => {
                busy = false;
                let psn = if s.cursor < s.next_new {
                    s.resent[s.cursor as usize] = true;
                    out.retransmissions += 1;
                    s.cursor += 1;
                    Some(s.cursor - 1)
                } else if s.next_new < n && ((s.next_new - s.base) as usize) < p.window {
                    s.first_tx[s.next_new as usize] = now;
                    s.next_new += 1;
                    s.cursor = s.next_new;
                    if s.deadline.is_none() {
                        s.deadline = Some(now + s.rto());
                    }
                    Some(s.next_new - 1)
                } else {
                    None
                };
                if let Some(psn) = psn {
                    out.transmissions += 1;
                    let bytes = p.header_bytes + lens[psn as usize] as u64;
                    let ser = ((bytes * 8) as f64 / p.rate_gbps).ceil() as u64;
                    let a = attempts.entry(psn).or_insert(0);
                    let action = fault(psn, *a);
                    *a += 1;
                    let arrive = now + ser + p.one_way_ns;
                    match action {
                        FaultAction::Deliver => push(&mut heap, &mut evs, arrive, Ev::Arrive(psn)),
                        FaultAction::Drop => {}
                        FaultAction::Duplicate => {
                            push(&mut heap, &mut evs, arrive, Ev::Arrive(psn));
                            push(&mut heap, &mut evs, arrive + 1, Ev::Arrive(psn));
                        }
                        FaultAction::Delay(d) => {
                            push(&mut heap, &mut evs, arrive + d, Ev::Arrive(psn))
                        }
                    }
                    free_at = now + ser;
                    busy = true;
                    push(&mut heap, &mut evs, free_at, Ev::TxFree);
                }
            }
            Ev::Arrive(psn) => {
                let fb = if psn == expected {
                    expected += 1;
                    nak_sent = false;
                    out.accepted.push(psn);
                    Some(Ev::Ack(psn))
                } else if psn < expected {
                    Some(Ev::Ack(expected - 1))
                } else if !nak_sent {
                    nak_sent = true;
                    Some(Ev::Nak(expected))
                } else {
                    None
                };
                if let Some(fb) = fb {
                    push(&mut heap, &mut evs, now + p.one_way_ns, fb);
                }
            }
            Ev::Ack(a) => {
                s.retire_through(a, now);
                kick = true;
            }
            Ev::Nak(e) => {
                if s.in_flight() && e >= s.base {
                    if e > 0 {
                        s.retire_through(e - 1, now);
                    }
                    if s.in_flight() && s.base == e {
                        s.cursor = s.base;
                        s.deadline = Some(now + s.rto());
                    }
                }
                kick = true;
            }
            Ev::Timer(t) => {
                if armed == Some(t) {
                    armed = None;
                    if s.deadline.is_some_and(|d| d <= now) && s.in_flight() {
                        out.timeouts += 1;
                        s.cursor = s.base;
                        s.deadline = Some(now + s.rto());
                    }
                    kick = true;
                }
            }
        }
        if kick && !busy {
            busy = true;
            push(&mut heap, &mut evs, now.max(free_at), Ev::TxFree);
        }
        match s.deadline {
            Some(d) if armed != Some(d) => {
                armed = Some(d);
                push(&mut heap, &mut evs, d.max(now), Ev::Timer(d));
            }
            None => armed = None,
            _ => {}
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Cache

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum St {
    Clean,
    Dirty,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Traffic {
    pub hits: u64,
    pub misses: u64,
    pub evictions_clean: u64,
    pub evictions_dirty: u64,
    pub writeback_bytes: u64,
    pub fill_bytes: u64,
    pub bypass_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOp {
    DeviceWrite,
    CoreWrite,
    Read,
    Invalidate,
}

/// Explicit-state cache: every set is a recency list of `(line, state)`
/// with the most recently used line last.
pub struct CacheOracle {
    pub line: u64,
    pub sets: u64,
    pub ways: usize,
    pub ddio: bool,
    pub state: Vec<Vec<(u64, St)>>,
}

impl CacheOracle {
    pub fn new(sets: u64, ways: usize, line: u64, ddio: bool) -> Self {
        CacheOracle {
            line,
            sets,
            ways,
            ddio,
            state: vec![Vec::new(); sets as usize],
        }
    }

    pub fn lookup(&self, addr: u64) -> Option<St> {
        let l = addr / self.line;
        self.state[(l % self.sets) as usize]
            .iter()
            .find(|(x, _)| *x == l)
            .map(|(_, s)| *s)
    }

    pub fn resident(&self) -> usize {
        self.state.iter().map(Vec::len).sum()
    }

    /// Returns the traffic, or the number of discarded lines for invalidate.
    pub fn apply(&mut self, op: CacheOp, addr: u64, len: u64) -> (Traffic, u64) {
        let mut t = Traffic::default();
        if len == 0 {
            return (t, 0);
        }
        let mut discarded = 0;
        let lb = self.line;
        for l in addr / lb..=(addr + len - 1) / lb {
            let set = &mut self.state[(l % self.sets) as usize];
            let covered = ((l + 1) * lb).min(addr + len) - (l * lb).max(addr);
            let pos = set.iter().position(|(x, _)| *x == l);
            if op == CacheOp::Invalidate {
                if let Some(i) = pos {
                    set.remove(i);
                    discarded += 1;
                }
                continue;
            }
            if let Some(i) = pos {
                t.hits += 1;
                let (_, mut s) = set.remove(i);
                match op {
                    CacheOp::Read => {}
                    CacheOp::DeviceWrite if !self.ddio => {
                        t.bypass_bytes += covered;
                        continue;
                    }
                    _ => s = St::Dirty,
                }
                set.push((l, s));
                continue;
            }
            t.misses += 1;
            let allocate = op == CacheOp::CoreWrite || self.ddio;
            if !allocate {
                if op == CacheOp::Read {
                    t.fill_bytes += lb;
                } else {
                    t.bypass_bytes += covered;
                }
                continue;
            }
            if set.len() == self.ways {
                let (_, s) = set.remove(0);
                if s == St::Dirty {
                    t.evictions_dirty += 1;
                    t.writeback_bytes += lb;
                } else {
                    t.evictions_clean += 1;
                }
            }
            let s = if op == CacheOp::Read {
                t.fill_bytes += lb;
                St::Clean
            } else {
                if covered < lb {
                    t.fill_bytes += lb;
                }
                St::Dirty
            };
            set.push((l, s));
        }
        (t, discarded)
    }
}

// ---------------------------------------------------------------------------

/// Deterministic payload for message `i` of length `len`.
pub fn payload(i: u64, len: usize) -> Vec<u8> {
    (0..len)
        .map(|k| (i.wrapping_mul(31).wrapping_add(k as u64 * 7) % 251) as u8)
        .collect()
}

pub fn queue_of<T: Clone>(v: &[T]) -> VecDeque<T> {
    v.iter().cloned().collect()
}
