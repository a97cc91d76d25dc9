//! Go-back-N link checks against the replay oracle.

use super::{gbn_replay, payload, GbnParams};
use nicstack::transport::{
    run_link, FaultAction, FaultPlan, GbnConfig, GbnReceiver, GbnSender, LinkConfig, Opcode,
    RandomFaults, DEFAULT_MTU, HEADER_BYTES,
};

pub const RATE: f64 = 400.0;
pub const ONE_WAY: u64 = 1500;

pub fn params(cfg: &GbnConfig) -> GbnParams {
    GbnParams {
        rate_gbps: RATE,
        one_way_ns: ONE_WAY,
        window: cfg.max_outstanding,
        rto_min_ns: cfg.rto_min,
        rto_mult: cfg.rto_srtt_mult,
        header_bytes: HEADER_BYTES as u64,
    }
}

/// Per-packet payload sizes of a message stream, segmented at the MTU.
pub fn packet_lens(msgs: &[usize]) -> Vec<u32> {
    let mtu = DEFAULT_MTU as usize;
    let mut v = Vec::new();
    for &m in msgs {
        let n = m.div_ceil(mtu).max(1);
        for i in 0..n {
            v.push((m - i * mtu).min(mtu) as u32);
        }
    }
    v
}

pub struct Outcome {
    pub delivered: Vec<u8>,
    pub sent: Vec<u8>,
    pub retransmissions: u64,
    pub timeouts: u64,
    pub completed: bool,
    pub messages: u64,
}

pub fn run(msgs: &[usize], plan: &FaultPlan) -> Outcome {
    let mut tx = GbnSender::new(1, 0, GbnConfig::default());
    let mut rx = GbnReceiver::new(1, 0);
    let mut sent = Vec::new();
    for (i, &m) in msgs.iter().enumerate() {
        let p = payload(i as u64, m);
        tx.enqueue(Opcode::Send, &p, 0);
        sent.extend_from_slice(&p);
    }
    let rep = run_link(&mut tx, &mut rx, plan, &LinkConfig::new(RATE, ONE_WAY));
    Outcome {
        delivered: rep.delivered,
        sent,
        retransmissions: rep.retransmissions,
        timeouts: tx.timeouts(),
        completed: rep.completed,
        messages: rep.messages,
    }
}

/// Runs the link and the replay on the same faults; returns the
/// retransmission count after checking both agree.
pub fn check_against_oracle(msgs: &[usize], plan: &FaultPlan) -> u64 {
    let got = run(msgs, plan);
    let lens = packet_lens(msgs);
    let want = gbn_replay(&lens, &params(&GbnConfig::default()), |psn, a| {
        plan.decide(psn, a)
    });
    assert!(got.completed);
    assert_eq!(got.messages, msgs.len() as u64);
    assert!(got.delivered == got.sent, "delivered stream differs");
    assert_eq!(want.accepted, (0..lens.len() as u32).collect::<Vec<_>>());
    assert_eq!(
        got.retransmissions, want.retransmissions,
        "retransmissions vs replay"
    );
    assert_eq!(got.timeouts, want.timeouts, "timeouts vs replay");
    got.retransmissions
}

/// The 10^5-message mixed-size stream.
pub fn hundred_thousand() -> Vec<usize> {
    (0..100_000u64)
        .map(|i| [1usize, 64, 200, 1024, 5000][(i % 5) as usize] + (i as usize % 17))
        .collect()
}

pub fn standard_faults(seed: u64) -> FaultPlan {
    FaultPlan::random(RandomFaults {
        seed,
        loss: 0.01,
        reorder: 0.05,
        dup: 0.001,
        reorder_delay: 3000,
    })
}

/// Every subset of first-transmission drops, then every subset of drops
/// of the go-back copies after packet 0 is lost.
pub fn drop_subsets(n: u32) {
    let msgs = vec![100usize; n as usize];
    for mask in 0u32..1 << n {
        check_against_oracle(
            &msgs,
            &FaultPlan::drops((0..n).filter(|i| mask >> i & 1 == 1)),
        );
        let mut plan = FaultPlan::drops([0]);
        for i in (0..n).filter(|i| mask >> i & 1 == 1) {
            plan.set(i, 1, FaultAction::Drop);
        }
        check_against_oracle(&msgs, &plan);
    }
}
