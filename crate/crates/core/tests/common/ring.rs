//! Ring protocol drivers shared by the property suite and the acceptance report.

use std::collections::HashSet;

use nicstack::pipe::shm::shm_pipe;
use nicstack::pipe::{DmaPipe, PipeDma, PipeElement, PipeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn el(i: u64) -> PipeElement {
    PipeElement::raw(&i.to_le_bytes())
}

pub fn val(e: &PipeElement) -> u64 {
    u64::from_le_bytes(e.body[..8].try_into().unwrap())
}

/// Random producer/DMA/consumer interleaving with DMAs completing in any
/// order. Returns the number of elements consumed.
pub fn sim_run(seed: u64, depth: usize, period: u64, total: u64, max_batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pipe = DmaPipe::new(depth, period).unwrap();
    let mut pending: Vec<PipeDma> = Vec::new();
    let (mut next, mut want) = (0u64, 0u64);
    while want < total {
        if next < total && rng.gen_bool(0.6) {
            let n = rng.gen_range(1..=max_batch).min((total - next) as usize);
            let batch: Vec<_> = (next..next + n as u64).map(el).collect();
            match pipe.produce_blocking(&batch) {
                Ok(d) => {
                    pending.push(d);
                    next += n as u64;
                }
                Err(PipeError::Full { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        if !pending.is_empty() && rng.gen_bool(0.5) {
            let i = rng.gen_range(0..pending.len());
            pipe.complete(&pending.swap_remove(i));
        }
        let burst = rng.gen_range(0..=2 * max_batch);
        for _ in 0..burst {
            match pipe.consume() {
                Some(e) => {
                    assert_eq!(val(&e), want, "FIFO order");
                    want += 1;
                }
                None => break,
            }
        }
        let p = pipe.producer();
        assert!(
            p.index() - p.known_consumed() <= depth as u64,
            "producer overran the consumer"
        );
        assert!(pipe.consumer_index() <= p.index());
    }
    assert!(pending.is_empty() || pending.iter().all(|d| d.count == 0));
    assert!(pipe.consume().is_none(), "element after the last one");
    want
}

/// Two threads, `n` elements in batches of 1 to 5. Returns the producer's
/// counter reads.
pub fn shm_run(n: u64, depth: usize, period: u64) -> u64 {
    let (mut tx, mut rx) = shm_pipe(depth, period).unwrap();
    let producer = std::thread::spawn(move || {
        let mut i = 0;
        while i < n {
            let k = (1 + i % 5).min(n - i);
            let batch: Vec<_> = (i..i + k).map(el).collect();
            tx.produce(&batch).unwrap();
            i += k;
        }
        tx.counter_reads()
    });
    let mut want = 0;
    while want < n {
        match rx.consume() {
            Some(e) => {
                assert_eq!(val(&e), want, "FIFO order");
                want += 1;
            }
            None => std::thread::yield_now(),
        }
    }
    let reads = producer.join().unwrap();
    assert!(rx.consume().is_none(), "element after the last one");
    reads
}

// ---------------------------------------------------------------------------
// Exhaustive interleavings

#[derive(Clone)]
struct State {
    pipe: DmaPipe,
    pending: Vec<PipeDma>,
}

pub struct Explorer {
    pub depth: usize,
    pub seen: HashSet<(String, usize)>,
    pub states: u64,
    pub max_consumed: u64,
}

impl Explorer {
    fn check(&mut self, s: &State) {
        let p = s.pipe.producer();
        let c = s.pipe.consumer_index();
        assert!(p.known_consumed() <= c && c <= p.index());
        assert!(p.index() - p.known_consumed() <= self.depth as u64);
        assert!(
            s.pending.iter().all(|d| d.first >= c),
            "DMA pending for a consumed slot"
        );
        // once every DMA has landed the consumer must see exactly the
        // outstanding elements, in order
        let mut t = s.clone();
        for d in t.pending.drain(..) {
            t.pipe.complete(&d);
        }
        let mut want = c;
        while let Some(e) = t.pipe.consume() {
            assert_eq!(val(&e), want);
            want += 1;
        }
        assert_eq!(want, p.index(), "elements lost");
        self.max_consumed = self.max_consumed.max(c);
    }

    fn explore(&mut self, s: State, steps: usize) {
        self.check(&s);
        self.states += 1;
        if steps == 0
            || !self
                .seen
                .insert((format!("{:?}{:?}", s.pipe, s.pending), steps))
        {
            return;
        }
        for n in 1..=2u64 {
            let mut t = s.clone();
            let first = t.pipe.producer().index();
            let batch: Vec<_> = (first..first + n).map(el).collect();
            if let Ok(d) = t.pipe.produce(&batch) {
                t.pending.push(d);
                self.explore(t, steps - 1);
            }
        }
        for i in 0..s.pending.len() {
            let mut t = s.clone();
            let d = t.pending.remove(i);
            t.pipe.complete(&d);
            self.explore(t, steps - 1);
        }
        let mut t = s.clone();
        if let Some(e) = t.pipe.consume() {
            assert_eq!(val(&e), s.pipe.consumer_index());
            self.explore(t, steps - 1);
        }
        if s.pipe.producer().known_consumed() != s.pipe.consumer_index() {
            let mut t = s.clone();
            t.pipe.read_consumer_counter();
            self.explore(t, steps - 1);
        }
    }
}

/// Explores every action sequence of up to `steps` steps on a ring of
/// `depth` slots, checking the invariants in every state.
pub fn explore(depth: usize, steps: usize) -> Explorer {
    let mut x = Explorer {
        depth,
        seen: HashSet::new(),
        states: 0,
        max_consumed: 0,
    };
    let s = State {
        pipe: DmaPipe::new(depth, 1).unwrap(),
        pending: Vec::new(),
    };
    x.explore(s, steps);
    x
}
