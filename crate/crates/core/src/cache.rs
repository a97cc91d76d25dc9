//! Arm last-level cache: set-associative, write-allocate, write-back, LRU,
//! with an explicit discard-invalidate primitive.
//!
//! Device writes (NIC DMA) allocate into the cache when DDIO is enabled.
//! Full-line writes skip the memory fill; partial-line writes fetch the line
//! first. With DDIO disabled, device writes go straight to DRAM (counted as
//! `bypass_bytes`) and device reads do not allocate.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("invalidate range [{addr:#x}, +{len}) is not aligned to {line} byte lines")]
    Misaligned { addr: u64, len: u64, line: u32 },
    #[error("invalid cache geometry: {0}")]
    Geometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheGeometry {
    pub capacity_bytes: u64,
    pub line_bytes: u32,
    pub associativity: u32,
}

impl CacheGeometry {
    pub fn new(
        capacity_bytes: u64,
        line_bytes: u32,
        associativity: u32,
    ) -> Result<Self, CacheError> {
        if line_bytes == 0 || !line_bytes.is_power_of_two() {
            return Err(CacheError::Geometry(
                "line size must be a power of two".into(),
            ));
        }
        if associativity == 0 {
            return Err(CacheError::Geometry(
                "associativity must be positive".into(),
            ));
        }
        let way = line_bytes as u64 * associativity as u64;
        if capacity_bytes == 0 || capacity_bytes % way != 0 {
            return Err(CacheError::Geometry(format!(
                "capacity {capacity_bytes} not divisible by line*ways {way}"
            )));
        }
        Ok(CacheGeometry {
            capacity_bytes,
            line_bytes,
            associativity,
        })
    }

    pub fn sets(&self) -> u64 {
        self.capacity_bytes / (self.line_bytes as u64 * self.associativity as u64)
    }

    pub fn from_profile(p: &crate::sim::HardwareProfile) -> Result<Self, CacheError> {
        Self::new(p.llc_capacity_bytes, p.cacheline_bytes, p.llc_associativity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LineState {
    Invalid,
    Clean,
    Dirty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AccessReport {
    pub hits: u64,
    pub misses: u64,
    pub evictions_clean: u64,
    pub evictions_dirty: u64,
    pub writeback_bytes: u64,
    pub fill_bytes: u64,
    /// Device writes that went straight to DRAM (DDIO disabled).
    pub bypass_bytes: u64,
}

impl AccessReport {
    /// Total DRAM traffic caused by the access.
    pub fn memory_bytes(&self) -> u64 {
        self.writeback_bytes + self.fill_bytes + self.bypass_bytes
    }
}

impl AddAssign for AccessReport {
    fn add_assign(&mut self, o: Self) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.evictions_clean += o.evictions_clean;
        self.evictions_dirty += o.evictions_dirty;
        self.writeback_bytes += o.writeback_bytes;
        self.fill_bytes += o.fill_bytes;
        self.bypass_bytes += o.bypass_bytes;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOp {
    DeviceWrite,
    CoreWrite,
    Read,
    Invalidate,
}

impl AccessOp {
    fn name(self) -> &'static str {
        match self {
            AccessOp::DeviceWrite => "write",
            AccessOp::CoreWrite => "core_write",
            AccessOp::Read => "read",
            AccessOp::Invalidate => "invalidate",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Way {
    tag: u64,
    state: LineState,
    stamp: u64,
}

const EMPTY: Way = Way {
    tag: 0,
    state: LineState::Invalid,
    stamp: 0,
};

#[derive(Debug, Clone)]
pub struct Llc {
    geom: CacheGeometry,
    sets: u64,
    ways: Vec<Way>,
    clock: u64,
    ddio: bool,
    totals: AccessReport,
    trace: Option<String>,
}

impl Llc {
    pub fn new(geom: CacheGeometry) -> Self {
        let sets = geom.sets();
        Llc {
            geom,
            sets,
            ways: vec![EMPTY; (sets * geom.associativity as u64) as usize],
            clock: 0,
            ddio: true,
            totals: AccessReport::default(),
            trace: None,
        }
    }

    pub fn with_ddio(mut self, enabled: bool) -> Self {
        self.ddio = enabled;
        self
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geom
    }

    pub fn line_bytes(&self) -> u64 {
        self.geom.line_bytes as u64
    }

    pub fn totals(&self) -> AccessReport {
        self.totals
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(String::new);
    }

    /// One line per access: `op addr len hits misses ev_clean ev_dirty wb fill bypass`.
    pub fn trace_dump(&self) -> &str {
        self.trace.as_deref().unwrap_or("")
    }

    pub fn state_of(&self, addr: u64) -> LineState {
        let line = addr / self.line_bytes();
        let (set, tag) = self.locate(line);
        self.set_ways(set)
            .iter()
            .find(|w| w.state != LineState::Invalid && w.tag == tag)
            .map_or(LineState::Invalid, |w| w.state)
    }

    pub fn resident_lines(&self) -> u64 {
        self.ways
            .iter()
            .filter(|w| w.state != LineState::Invalid)
            .count() as u64
    }

    pub fn dirty_lines(&self) -> u64 {
        self.ways
            .iter()
            .filter(|w| w.state == LineState::Dirty)
            .count() as u64
    }

    /// NIC DMA write into Arm memory.
    pub fn write(&mut self, addr: u64, len: u64) -> AccessReport {
        self.access(AccessOp::DeviceWrite, addr, len)
    }

    /// Arm core store; always allocates regardless of DDIO.
    pub fn core_write(&mut self, addr: u64, len: u64) -> AccessReport {
        self.access(AccessOp::CoreWrite, addr, len)
    }

    pub fn read(&mut self, addr: u64, len: u64) -> AccessReport {
        self.access(AccessOp::Read, addr, len)
    }

    /// Discards every cached line of a line-aligned range without writeback.
    pub fn invalidate(&mut self, addr: u64, len: u64) -> Result<u64, CacheError> {
        let lb = self.line_bytes();
        if addr % lb != 0 || len % lb != 0 {
            return Err(CacheError::Misaligned {
                addr,
                len,
                line: self.geom.line_bytes,
            });
        }
        let mut count = 0;
        for line in addr / lb..(addr + len) / lb {
            let (set, tag) = self.locate(line);
            if let Some(w) = self
                .set_ways_mut(set)
                .iter_mut()
                .find(|w| w.state != LineState::Invalid && w.tag == tag)
            {
                *w = EMPTY;
                count += 1;
            }
        }
        self.record(AccessOp::Invalidate, addr, len, &AccessReport::default());
        Ok(count)
    }

    fn access(&mut self, op: AccessOp, addr: u64, len: u64) -> AccessReport {
        let mut rep = AccessReport::default();
        if len == 0 {
            return rep;
        }
        let lb = self.line_bytes();
        let first = addr / lb;
        let last = (addr + len - 1) / lb;
        for line in first..=last {
            let lo = (line * lb).max(addr);
            let hi = ((line + 1) * lb).min(addr + len);
            let covered = hi - lo;
            self.access_line(op, line, covered == lb, covered, &mut rep);
        }
        self.totals += rep;
        self.record(op, addr, len, &rep);
        rep
    }

    fn access_line(
        &mut self,
        op: AccessOp,
        line: u64,
        full: bool,
        covered: u64,
        rep: &mut AccessReport,
    ) {
        let lb = self.line_bytes();
        let (set, tag) = self.locate(line);
        self.clock += 1;
        let stamp = self.clock;
        let ddio = self.ddio;
        let ways = self.set_ways_mut(set);
        let hit = ways
            .iter_mut()
            .find(|w| w.state != LineState::Invalid && w.tag == tag);
        if let Some(w) = hit {
            rep.hits += 1;
            w.stamp = stamp;
            if op != AccessOp::Read {
                if op == AccessOp::DeviceWrite && !ddio {
                    // Written behind the cache; the cached copy is stale.
                    *w = EMPTY;
                    rep.bypass_bytes += covered;
                } else {
                    w.state = LineState::Dirty;
                }
            }
            return;
        }
        rep.misses += 1;
        let allocate = match op {
            AccessOp::DeviceWrite | AccessOp::Read => ddio,
            AccessOp::CoreWrite => true,
            AccessOp::Invalidate => unreachable!(),
        };
        if !allocate {
            match op {
                AccessOp::Read => rep.fill_bytes += lb,
                _ => rep.bypass_bytes += covered,
            }
            return;
        }
        let victim = match ways.iter().position(|w| w.state == LineState::Invalid) {
            Some(i) => i,
            None => {
                let (i, _) = ways
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, w)| w.stamp)
                    .expect("non-empty set");
                match ways[i].state {
                    LineState::Dirty => {
                        rep.evictions_dirty += 1;
                        rep.writeback_bytes += lb;
                    }
                    LineState::Clean => rep.evictions_clean += 1,
                    LineState::Invalid => unreachable!(),
                }
                i
            }
        };
        let state = match op {
            AccessOp::Read => {
                rep.fill_bytes += lb;
                LineState::Clean
            }
            _ => {
                if !full {
                    rep.fill_bytes += lb;
                }
                LineState::Dirty
            }
        };
        ways[victim] = Way { tag, state, stamp };
    }

    fn locate(&self, line: u64) -> (u64, u64) {
        (line % self.sets, line / self.sets)
    }

    fn set_ways(&self, set: u64) -> &[Way] {
        let a = self.geom.associativity as usize;
        let base = set as usize * a;
        &self.ways[base..base + a]
    }

    fn set_ways_mut(&mut self, set: u64) -> &mut [Way] {
        let a = self.geom.associativity as usize;
        let base = set as usize * a;
        &mut self.ways[base..base + a]
    }

    fn record(&mut self, op: AccessOp, addr: u64, len: u64, r: &AccessReport) {
        if let Some(t) = &mut self.trace {
            let _ = writeln!(
                t,
                "{} {:#x} {} {} {} {} {} {} {} {}",
                op.name(),
                addr,
                len,
                r.hits,
                r.misses,
                r.evictions_clean,
                r.evictions_dirty,
                r.writeback_bytes,
                r.fill_bytes,
                r.bypass_bytes
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Llc {
        // 4 sets x 2 ways x 64 B
        Llc::new(CacheGeometry::new(512, 64, 2).unwrap())
    }

    #[test]
    fn cold_full_line_write_is_dirty_without_fill() {
        let mut c = Llc::new(CacheGeometry::new(16 << 20, 64, 16).unwrap());
        let r = c.write(0, 4096);
        assert_eq!(r.misses, 64);
        assert_eq!(r.fill_bytes, 0);
        assert_eq!(r.writeback_bytes, 0);
        assert_eq!(c.dirty_lines(), 64);
    }

    #[test]
    fn partial_line_write_fetches() {
        let mut c = small();
        let r = c.write(10, 20);
        assert_eq!(r.fill_bytes, 64);
        assert_eq!(c.state_of(0), LineState::Dirty);
    }

    #[test]
    fn zero_length_is_a_noop() {
        let mut c = small();
        assert_eq!(c.write(0, 0), AccessReport::default());
        assert_eq!(c.read(0, 0), AccessReport::default());
    }

    #[test]
    fn read_after_write_hits_and_cold_read_fills() {
        let mut c = small();
        c.write(0, 128);
        let r = c.read(0, 128);
        assert_eq!((r.hits, r.misses), (2, 0));
        let r = c.read(1024, 100);
        assert_eq!(r.misses, 2);
        assert_eq!(r.fill_bytes, 128);
    }

    #[test]
    fn fitting_working_set_stops_writing_back() {
        let mut c = Llc::new(CacheGeometry::new(64 << 10, 64, 4).unwrap());
        let mut last = AccessReport::default();
        for _ in 0..4 {
            last = c.write(0, 32 << 10);
        }
        assert_eq!(last.writeback_bytes, 0);
        assert_eq!(last.hits, 512);
    }

    #[test]
    fn invalidate_discards_dirty_lines() {
        let mut c = Llc::new(CacheGeometry::new(16 << 20, 64, 16).unwrap());
        c.write(8192, 8192);
        assert_eq!(c.invalidate(8192, 8192).unwrap(), 128);
        assert_eq!(c.totals().writeback_bytes, 0);
        assert_eq!(c.invalidate(1 << 30, 8192).unwrap(), 0);
        assert_eq!(
            c.invalidate(1, 64),
            Err(CacheError::Misaligned {
                addr: 1,
                len: 64,
                line: 64
            })
        );
    }

    #[test]
    fn write_invalidate_write_misses_without_writeback() {
        let mut c = small();
        c.write(0, 256);
        c.invalidate(0, 256).unwrap();
        let r = c.write(0, 256);
        assert_eq!(r.misses, 4);
        assert_eq!(c.totals().writeback_bytes, 0);
    }

    #[test]
    fn ddio_off_bypasses_the_cache() {
        let mut c = small().with_ddio(false);
        let w = c.write(0, 128);
        assert_eq!(w.bypass_bytes, 128);
        let r = c.read(0, 128);
        assert_eq!(r.fill_bytes, 128);
        assert_eq!(c.resident_lines(), 0);
    }

    #[test]
    fn trace_has_one_line_per_access() {
        let mut c = small();
        c.enable_trace();
        c.write(0, 64);
        c.read(0, 64);
        c.invalidate(0, 64).unwrap();
        let lines: Vec<_> = c.trace_dump().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "write 0x0 64 0 1 0 0 0 0 0");
    }
}
