//! Drives the library cache and the explicit-state oracle side by side.

use super::{CacheOp, CacheOracle, St, Traffic};
use nicstack::cache::{AccessReport, CacheGeometry, LineState, Llc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LINE: u64 = 64;
/// Addresses span this many lines, several times the cache capacity.
pub const SPAN_LINES: u64 = 48;

pub fn traffic(r: &AccessReport) -> Traffic {
    Traffic {
        hits: r.hits,
        misses: r.misses,
        evictions_clean: r.evictions_clean,
        evictions_dirty: r.evictions_dirty,
        writeback_bytes: r.writeback_bytes,
        fill_bytes: r.fill_bytes,
        bypass_bytes: r.bypass_bytes,
    }
}

pub fn state(s: LineState) -> Option<St> {
    match s {
        LineState::Invalid => None,
        LineState::Clean => Some(St::Clean),
        LineState::Dirty => Some(St::Dirty),
    }
}

/// Drives the cache and the oracle with the same random stream and
/// compares every report and the full line state after each access.
pub fn compare(seed: u64, sets: u64, ways: u32, ddio: bool, ops: usize) {
    let mut llc =
        Llc::new(CacheGeometry::new(sets * ways as u64 * LINE, LINE as u32, ways).unwrap())
            .with_ddio(ddio);
    let mut oracle = CacheOracle::new(sets, ways as usize, LINE, ddio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..ops {
        let op = match rng.gen_range(0..10) {
            0..=2 => CacheOp::DeviceWrite,
            3..=4 => CacheOp::CoreWrite,
            5..=7 => CacheOp::Read,
            _ => CacheOp::Invalidate,
        };
        if op == CacheOp::Invalidate {
            let line = rng.gen_range(0..SPAN_LINES);
            let n = rng.gen_range(1..=4);
            let got = llc.invalidate(line * LINE, n * LINE).unwrap();
            let (_, want) = oracle.apply(op, line * LINE, n * LINE);
            assert_eq!(got, want, "step {step}: invalidate count");
        } else {
            let addr = rng.gen_range(0..SPAN_LINES * LINE);
            let len = rng.gen_range(0..=3 * LINE);
            let got = match op {
                CacheOp::DeviceWrite => llc.write(addr, len),
                CacheOp::CoreWrite => llc.core_write(addr, len),
                _ => llc.read(addr, len),
            };
            let (want, _) = oracle.apply(op, addr, len);
            assert_eq!(traffic(&got), want, "step {step}: {op:?} {addr} {len}");
        }
        for l in 0..SPAN_LINES {
            assert_eq!(
                state(llc.state_of(l * LINE)),
                oracle.lookup(l * LINE),
                "step {step}: line {l}"
            );
        }
        assert_eq!(llc.resident_lines() as usize, oracle.resident());
    }
}
