use std::collections::HashMap;

use nicstack::offload::handlers::{
    batched_read, batched_read_request, linked_list, linked_list_request, value_for, write_chain,
};
use nicstack::offload::{EngineConfig, OffloadEngine, ResponseStatus};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REGION: u64 = 0x10_0000;
const CHAIN: usize = 24;
const ITEMS: u64 = 0x18_0000;
const ITEM: u32 = 64;

#[derive(Debug, Clone)]
enum Act {
    List {
        core: usize,
        key: u64,
    },
    Batch {
        core: usize,
        items: Vec<u64>,
    },
    Poll,
    /// Completes a random subset of the outstanding DMAs in random order.
    Complete(u64),
    Expire,
}

fn act() -> impl Strategy<Value = Act> {
    prop_oneof![
        3 => (0usize..2, 1u64..=CHAIN as u64 + 4).prop_map(|(core, key)| Act::List { core, key }),
        2 => (0usize..2, prop::collection::vec(0u64..64, 1..8)).prop_map(|(core, items)| Act::Batch { core, items }),
        3 => Just(Act::Poll),
        4 => any::<u64>().prop_map(Act::Complete),
        1 => Just(Act::Expire),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Each delivered request gets exactly one response; successful ones
    /// carry what a direct read of host memory says they should.
    #[test]
    fn each_request_answered_once(acts in prop::collection::vec(act(), 1..120)) {
        let mut cfg = EngineConfig::new(2, 3);
        cfg.ctx_timeout = 50_000;
        let mut e = OffloadEngine::new(cfg).unwrap();
        e.register_dma_region(REGION, 1 << 20).unwrap();
        e.register_opcode(0x80, 1, linked_list()).unwrap();
        e.register_opcode(0x81, 1, batched_read()).unwrap();
        let addrs: Vec<u64> = (0..CHAIN as u64).rev().map(|i| REGION + i * 0x100).collect();
        let head = write_chain(&mut e, &addrs);
        for j in 0..64u64 {
            e.host_write(ITEMS + j * ITEM as u64, &[j as u8 ^ 0x5a; ITEM as usize]);
        }

        let mut want: HashMap<u64, Vec<u8>> = HashMap::new();
        let mut pending = Vec::new();
        let mut now = 0;
        let mut expired = 0;
        let mut responses = Vec::new();
        for a in acts {
            now += 1_000;
            match a {
                Act::List { core, key } => {
                    let id = e.deliver(core, 0x80, 1, linked_list_request(head, key)).unwrap();
                    want.insert(id, if key as usize <= CHAIN { value_for(key).to_vec() } else { Vec::new() });
                }
                Act::Batch { core, items } => {
                    let ptrs: Vec<u64> = items.iter().map(|j| ITEMS + j * ITEM as u64).collect();
                    let id = e.deliver(core, 0x81, 1, batched_read_request(ITEM, &ptrs)).unwrap();
                    want.insert(id, items.iter().flat_map(|&j| [j as u8 ^ 0x5a; ITEM as usize]).collect());
                }
                Act::Poll => e.poll(now),
                Act::Complete(seed) => {
                    pending.extend(e.take_dma_requests());
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    pending.shuffle(&mut rng);
                    let n = rng.gen_range(0..=pending.len());
                    for r in pending.drain(..n) {
                        e.complete_dma(&r);
                    }
                }
                Act::Expire => {
                    now += 60_000;
                    expired += e.expire(now);
                }
            }
            responses.extend(e.take_responses());
        }
        // let every surviving request finish
        for r in pending.drain(..) {
            e.complete_dma(&r);
        }
        e.run_until_idle(now);
        responses.extend(e.take_responses());

        prop_assert_eq!(e.live_contexts(), 0);
        prop_assert_eq!(responses.len(), want.len());
        let mut seen = std::collections::HashSet::new();
        let mut timed_out = 0;
        for r in &responses {
            prop_assert!(seen.insert(r.ctx), "ctx {} answered twice", r.ctx);
            match r.status {
                ResponseStatus::Ok => prop_assert_eq!(&r.payload, &want[&r.ctx], "ctx {}", r.ctx),
                ResponseStatus::TimedOut => timed_out += 1,
                ResponseStatus::NoResponse => prop_assert!(false, "handler returned without responding"),
            }
        }
        prop_assert_eq!(timed_out, expired);
    }
}
