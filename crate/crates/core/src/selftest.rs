//! Quick randomized self-checks for the `selftest` command. The full
//! property suites live in the integration tests; these run the same
//! invariants at a size that finishes in a few seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::offload::handlers::{linked_list, linked_list_request, value_for, write_chain};
use crate::offload::{EngineConfig, OffloadEngine};
use crate::pipe::shm::shm_pipe;
use crate::pipe::{DmaPipe, PipeElement, DEFAULT_COUNTER_PERIOD};
use crate::scenario::{run_scenario, ScenarioConfig, ScenarioKind};

pub struct Check {
    pub name: &'static str,
    pub result: Result<(), String>,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seq(i: u64) -> PipeElement {
    PipeElement::raw(&i.to_le_bytes())
}

fn seq_of(e: &PipeElement) -> u64 {
    u64::from_le_bytes(e.body[..8].try_into().unwrap())
}

fn pipe_fifo(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pipe = DmaPipe::new(64, DEFAULT_COUNTER_PERIOD).map_err(|e| e.to_string())?;
    let (mut next, mut want) = (0u64, 0u64);
    let mut in_flight = Vec::new();
    while want < 100_000 {
        if rng.gen_bool(0.5) && next < 100_000 {
            let n = rng.gen_range(1..=8).min(100_000 - next) as usize;
            let batch: Vec<_> = (next..next + n as u64).map(seq).collect();
            if let Ok(d) = pipe.produce_blocking(&batch) {
                in_flight.push(d);
                next += n as u64;
            }
        }
        if rng.gen_bool(0.5) && !in_flight.is_empty() {
            pipe.complete(&in_flight.remove(0));
        }
        while let Some(e) = pipe.consume() {
            ensure(seq_of(&e) == want, || {
                format!("expected {want}, got {}", seq_of(&e))
            })?;
            want += 1;
        }
    }
    Ok(())
}

fn shm_fifo() -> Result<(), String> {
    const N: u64 = 100_000;
    let (mut tx, mut rx) = shm_pipe(64, DEFAULT_COUNTER_PERIOD).map_err(|e| e.to_string())?;
    let producer = std::thread::spawn(move || {
        for i in 0..N {
            tx.produce(&[seq(i)]).expect("valid batch");
        }
    });
    let mut want = 0;
    while want < N {
        if let Some(e) = rx.consume() {
            ensure(seq_of(&e) == want, || {
                format!("expected {want}, got {}", seq_of(&e))
            })?;
            want += 1;
        } else {
            std::thread::yield_now();
        }
    }
    producer
        .join()
        .map_err(|_| "producer panicked".to_string())?;
    ensure(rx.consume().is_none(), || "extra element".into())
}

fn transport(seed: u64) -> Result<(), String> {
    let mut c = ScenarioConfig::new(ScenarioKind::BulkTransfer, seed);
    c.messages = 2000;
    c.payload_bytes = 1500;
    c.loss = 0.01;
    c.reorder = 0.05;
    c.dup = 0.001;
    let out = run_scenario(&c).map_err(|e| e.to_string())?;
    let s = out.summaries().next().ok_or("no summary")?;
    ensure(s["stream_intact"] == true, || {
        "delivered stream differs from sent stream".into()
    })?;
    ensure(s["verbs_cqes"] == s["verbs_signaled_wrs"], || {
        format!(
            "cqes {} vs signaled {}",
            s["verbs_cqes"], s["verbs_signaled_wrs"]
        )
    })
}

fn offload_exactly_once(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = OffloadEngine::new(EngineConfig::new(2, 2)).map_err(|e| e.to_string())?;
    e.register_dma_region(0x10_0000, 1 << 20)
        .map_err(|e| e.to_string())?;
    e.register_opcode(0x80, 1, linked_list())
        .map_err(|e| e.to_string())?;
    let addrs: Vec<u64> = (0..32).map(|i| 0x10_0000 + i * 0x100).collect();
    let head = write_chain(&mut e, &addrs);
    let mut keys = Vec::new();
    for _ in 0..200 {
        let key = rng.gen_range(1..=40);
        let ctx = e
            .deliver(rng.gen_range(0..2), 0x80, 1, linked_list_request(head, key))
            .map_err(|e| e.to_string())?;
        keys.push((ctx, key));
    }
    e.run_until_idle(0);
    let mut resp = e.take_responses();
    ensure(resp.len() == keys.len(), || {
        format!("{} responses for {} requests", resp.len(), keys.len())
    })?;
    resp.sort_by_key(|r| r.ctx);
    for (r, (ctx, key)) in resp.iter().zip(&keys) {
        ensure(r.ctx == *ctx, || format!("ctx {ctx} answered as {}", r.ctx))?;
        let want: &[u8] = if *key <= 32 { &value_for(*key) } else { &[] };
        ensure(r.payload == want, || format!("wrong value for key {key}"))?;
    }
    ensure(e.live_contexts() == 0, || "leaked contexts".into())
}

fn determinism(seed: u64) -> Result<(), String> {
    for kind in ScenarioKind::ALL {
        let mut c = ScenarioConfig::new(kind, seed);
        c.ops = 200;
        c.messages = 100;
        c.working_set = vec![64];
        c.max_hops = 8;
        let a = run_scenario(&c).map_err(|e| e.to_string())?;
        let b = run_scenario(&c).map_err(|e| e.to_string())?;
        ensure(a.jsonl() == b.jsonl() && a.csv() == b.csv(), || {
            format!("{} output differs between runs", kind.name())
        })?;
    }
    Ok(())
}

pub fn run(seed: u64) -> Vec<Check> {
    vec![
        Check {
            name: "pipe_fifo_sim",
            result: pipe_fifo(seed),
        },
        Check {
            name: "pipe_fifo_shared_memory",
            result: shm_fifo(),
        },
        Check {
            name: "transport_exactly_once",
            result: transport(seed),
        },
        Check {
            name: "offload_exactly_once",
            result: offload_exactly_once(seed),
        },
        Check {
            name: "scenario_determinism",
            result: determinism(seed),
        },
    ]
}
