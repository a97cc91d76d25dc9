mod common;

use common::payload;
use common::transport::{
    check_against_oracle, drop_subsets, hundred_thousand, standard_faults, ONE_WAY, RATE,
};
use nicstack::transport::{
    run_link, FaultAction, FaultPlan, GbnConfig, GbnReceiver, GbnSender, LinkConfig, Opcode,
    RandomFaults,
};
use proptest::prelude::*;

#[test]
fn random_faults_hundred_thousand_messages() {
    let r = check_against_oracle(&hundred_thousand(), &standard_faults(11));
    assert!(r > 0);
}

#[test]
fn every_drop_subset_of_ten_packets() {
    drop_subsets(10);
}

fn action() -> impl Strategy<Value = FaultAction> {
    prop_oneof![
        4 => Just(FaultAction::Deliver),
        2 => Just(FaultAction::Drop),
        1 => Just(FaultAction::Duplicate),
        1 => (1u64..20_000).prop_map(FaultAction::Delay),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scripted_faults_match_replay(
        msgs in prop::collection::vec(0usize..9000, 1..30),
        faults in prop::collection::vec((0u32..40, 0u32..3, action()), 0..40),
    ) {
        let mut plan = FaultPlan::none();
        for (psn, attempt, a) in faults {
            plan.set(psn, attempt, a);
        }
        check_against_oracle(&msgs, &plan);
    }

    #[test]
    fn acked_watermark_never_regresses(seed in any::<u64>(), loss in 0.0f64..0.2) {
        let mut tx = GbnSender::new(1, 0, GbnConfig::default());
        for i in 0..200u64 {
            tx.enqueue(Opcode::Write, &payload(i, 300), 0);
        }
        let mut rx = GbnReceiver::new(1, 0);
        let plan = FaultPlan::random(RandomFaults { seed, loss, reorder: 0.05, dup: 0.01, reorder_delay: 4000 });
        // drive by hand so the watermark can be sampled after every feedback
        struct Watch<'a> { tx: &'a mut GbnSender, last: Option<u32>, ok: bool }
        impl nicstack::transport::ReliableSender for Watch<'_> {
            fn poll_transmit(&mut self, now: u64) -> Option<nicstack::transport::Packet> { self.tx.poll_transmit(now) }
            fn on_feedback(&mut self, fb: &nicstack::transport::Packet, now: u64) {
                self.tx.on_feedback(fb, now);
                let w = self.tx.watermark();
                self.ok &= w >= self.last;
                self.last = w;
            }
            fn timer(&self) -> Option<u64> { self.tx.timer() }
            fn on_timer(&mut self, now: u64) { self.tx.on_timer(now) }
            fn idle(&self) -> bool { self.tx.idle() }
            fn retransmissions(&self) -> u64 { self.tx.retransmissions() }
        }
        let mut w = Watch { tx: &mut tx, last: None, ok: true };
        let rep = run_link(&mut w, &mut rx, &plan, &LinkConfig::new(RATE, ONE_WAY));
        prop_assert!(w.ok);
        prop_assert!(rep.completed);
    }
}
