mod common;

use common::ring::{explore, shm_run, sim_run};
use nicstack::pipe::{phase_of, DEFAULT_COUNTER_PERIOD};
use proptest::prelude::*;

#[test]
fn sim_million_elements() {
    let depth = 64;
    let n = sim_run(7, depth, DEFAULT_COUNTER_PERIOD, 1_000_000, 8);
    assert_eq!(n, 1_000_000);
    assert!(n / depth as u64 >= 100, "wraps");
}

#[test]
fn shared_memory_million_elements() {
    const N: u64 = 1_000_000;
    let reads = shm_run(N, 64, DEFAULT_COUNTER_PERIOD);
    assert!(
        reads >= N / DEFAULT_COUNTER_PERIOD / 2,
        "counter reads {reads}"
    );
}

#[test]
fn phase_flips_every_wrap() {
    for depth in [1usize, 2, 8, 64] {
        for idx in 0..depth as u64 * 300 {
            assert_eq!(phase_of(idx, depth), (idx / depth as u64) % 2 == 0);
            assert_ne!(phase_of(idx, depth), phase_of(idx + depth as u64, depth));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sim_fifo_random_geometry(seed in any::<u64>(), depth_log in 0u32..7, period in 1u64..40, max_batch in 1usize..8) {
        let depth = 1usize << depth_log;
        let total = 20_000;
        prop_assert_eq!(sim_run(seed, depth, period, total, max_batch.min(depth)), total);
    }
}

#[test]
fn exhaustive_depth_two_twelve_steps() {
    let x = explore(2, 12);
    // 12 steps are enough to wrap a depth-2 ring at least twice
    assert!(x.max_consumed >= 4, "max consumed {}", x.max_consumed);
    assert!(x.seen.len() >= 100, "only {} distinct states", x.seen.len());
}

#[test]
fn exhaustive_depth_four_ten_steps() {
    let x = explore(4, 10);
    assert!(x.max_consumed >= 4);
}
