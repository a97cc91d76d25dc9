//! DCQCN-style rate control and a fluid multi-flow link for exercising it.
//!
//! Default parameters are conventions, not measured values: g = 1/16,
//! 55 µs increase/decay timer, 5 Gbps additive step, 50 Gbps hyper step,
//! 5 fast-recovery rounds, 1 Gbps floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sim::{Nanos, US};

#[derive(Debug, Clone, Copy)]
pub struct CcParams {
    pub line_rate_gbps: f64,
    pub g: f64,
    pub timer_ns: Nanos,
    pub additive_gbps: f64,
    pub hyper_gbps: f64,
    pub fast_recovery_rounds: u32,
    pub floor_gbps: f64,
    /// Minimum spacing between congestion notifications acted upon.
    pub cnp_interval_ns: Nanos,
}

impl CcParams {
    pub fn with_line_rate(line_rate_gbps: f64) -> Self {
        CcParams {
            line_rate_gbps,
            g: 1.0 / 16.0,
            timer_ns: 55 * US,
            additive_gbps: 5.0,
            hyper_gbps: 50.0,
            fast_recovery_rounds: 5,
            floor_gbps: 1.0,
            cnp_interval_ns: 50 * US,
        }
    }
}

/// Congestion-control policy interface.
pub trait CongestionControl {
    fn rate_gbps(&self) -> f64;
    fn on_mark(&mut self, now: Nanos);
    fn on_timer(&mut self, now: Nanos);
    fn on_send(&mut self, _bytes: u64) {}
}

#[derive(Debug, Clone)]
pub struct Dcqcn {
    p: CcParams,
    rate: f64,
    target: f64,
    alpha: f64,
    rounds: u32,
    marked_since_timer: bool,
    last_cnp: Option<Nanos>,
    marks: u64,
}

impl Dcqcn {
    pub fn new(p: CcParams) -> Self {
        Dcqcn {
            p,
            rate: p.line_rate_gbps,
            target: p.line_rate_gbps,
            alpha: 1.0,
            rounds: 0,
            marked_since_timer: false,
            last_cnp: None,
            marks: 0,
        }
    }

    pub fn params(&self) -> &CcParams {
        &self.p
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn target_gbps(&self) -> f64 {
        self.target
    }

    pub fn marks(&self) -> u64 {
        self.marks
    }
}

impl CongestionControl for Dcqcn {
    fn rate_gbps(&self) -> f64 {
        self.rate
    }

    fn on_mark(&mut self, now: Nanos) {
        if self
            .last_cnp
            .is_some_and(|t| now < t + self.p.cnp_interval_ns)
        {
            return;
        }
        self.last_cnp = Some(now);
        self.marks += 1;
        self.target = self.rate;
        self.rate = (self.rate * (1.0 - self.alpha / 2.0)).max(self.p.floor_gbps);
        self.alpha = (1.0 - self.p.g) * self.alpha + self.p.g;
        self.rounds = 0;
        self.marked_since_timer = true;
    }

    fn on_timer(&mut self, _now: Nanos) {
        if !self.marked_since_timer {
            self.alpha *= 1.0 - self.p.g;
        }
        self.marked_since_timer = false;
        self.rounds += 1;
        let f = self.p.fast_recovery_rounds;
        if self.rounds > 2 * f {
            self.target += self.p.hyper_gbps * (self.rounds - 2 * f) as f64;
        } else if self.rounds > f {
            self.target += self.p.additive_gbps;
        }
        self.target = self.target.min(self.p.line_rate_gbps);
        self.rate =
            ((self.rate + self.target) / 2.0).clamp(self.p.floor_gbps, self.p.line_rate_gbps);
    }
}

const MARK_PACKET_BYTES: f64 = 4160.0;

/// Flows sharing one bottleneck, advanced on a fixed time step. When the
/// offered load exceeds `mark_threshold` of capacity each packet is marked
/// with probability rising linearly to 1 at full capacity; throughput
/// above capacity is scaled back proportionally.
#[derive(Debug, Clone)]
pub struct FluidCcLink {
    pub capacity_gbps: f64,
    pub mark_threshold: f64,
    pub step_ns: Nanos,
    flows: Vec<FluidFlow>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct FluidFlow {
    cc: Dcqcn,
    start: Nanos,
    next_timer: Nanos,
    delivered_bits: f64,
    active_ns: Nanos,
}

impl FluidCcLink {
    pub fn new(capacity_gbps: f64, seed: u64) -> Self {
        FluidCcLink {
            capacity_gbps,
            mark_threshold: 0.95,
            step_ns: US,
            flows: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add_flow(&mut self, params: CcParams, start: Nanos) -> usize {
        let timer_phase = self.rng.gen_range(0..params.timer_ns);
        self.flows.push(FluidFlow {
            cc: Dcqcn::new(params),
            start,
            next_timer: start + timer_phase,
            delivered_bits: 0.0,
            active_ns: 0,
        });
        self.flows.len() - 1
    }

    pub fn flow(&self, i: usize) -> &Dcqcn {
        &self.flows[i].cc
    }

    /// Average delivered rate of flow `i` over its active time.
    pub fn mean_rate_gbps(&self, i: usize) -> f64 {
        let f = &self.flows[i];
        if f.active_ns == 0 {
            0.0
        } else {
            f.delivered_bits / f.active_ns as f64
        }
    }

    /// Runs from `from` to `to`; statistics only accumulate after `measure_from`.
    pub fn run(&mut self, from: Nanos, to: Nanos, measure_from: Nanos) {
        let mut t = from;
        while t < to {
            let active: Vec<usize> = (0..self.flows.len())
                .filter(|&i| self.flows[i].start <= t)
                .collect();
            let offered: f64 = active.iter().map(|&i| self.flows[i].cc.rate_gbps()).sum();
            let scale = if offered > self.capacity_gbps {
                self.capacity_gbps / offered
            } else {
                1.0
            };
            let threshold = self.mark_threshold * self.capacity_gbps;
            let p_mark = if offered > threshold {
                ((offered - threshold) / (self.capacity_gbps - threshold)).min(1.0)
            } else {
                0.0
            };
            for &i in &active {
                let f = &mut self.flows[i];
                if t >= measure_from {
                    f.delivered_bits += f.cc.rate_gbps() * scale * self.step_ns as f64;
                    f.active_ns += self.step_ns;
                }
                // at least one of this step's packets is marked
                let pkts = f.cc.rate_gbps() * self.step_ns as f64 / (8.0 * MARK_PACKET_BYTES);
                if p_mark > 0.0 && self.rng.gen::<f64>() < 1.0 - (1.0 - p_mark).powf(pkts) {
                    f.cc.on_mark(t);
                }
                while f.next_timer <= t {
                    f.cc.on_timer(t);
                    f.next_timer += f.cc.params().timer_ns;
                }
            }
            t += self.step_ns;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::MS;

    #[test]
    fn no_marks_converges_to_line_rate() {
        let mut cc = Dcqcn::new(CcParams::with_line_rate(400.0));
        cc.on_mark(0);
        assert!(cc.rate_gbps() < 400.0);
        for i in 1..200 {
            cc.on_timer(i * 55 * US);
        }
        assert!((cc.rate_gbps() - 400.0).abs() < 1e-6);
    }

    #[test]
    fn mark_storm_hits_floor_not_zero() {
        let p = CcParams::with_line_rate(400.0);
        let mut cc = Dcqcn::new(p);
        for i in 0..10_000 {
            cc.on_mark(i * p.cnp_interval_ns);
            assert!(cc.rate_gbps() >= p.floor_gbps);
        }
        assert!((cc.rate_gbps() - p.floor_gbps).abs() < 1e-9);
    }

    #[test]
    fn decrease_formula() {
        let mut cc = Dcqcn::new(CcParams::with_line_rate(100.0));
        cc.on_mark(0);
        assert!((cc.rate_gbps() - 50.0).abs() < 1e-9);
        assert!((cc.alpha() - 1.0).abs() < 1e-12);
        cc.on_mark(10);
        assert!(
            (cc.rate_gbps() - 50.0).abs() < 1e-9,
            "second mark inside CNP interval ignored"
        );
    }

    #[test]
    fn two_flows_share_fairly() {
        let p = CcParams::with_line_rate(400.0);
        let mut link = FluidCcLink::new(400.0, 11);
        let a = link.add_flow(p, 0);
        let b = link.add_flow(p, MS);
        link.run(0, 200 * MS, 20 * MS);
        for f in [a, b] {
            let r = link.mean_rate_gbps(f);
            assert!((r - 200.0).abs() <= 30.0, "flow {f} averaged {r}");
        }
    }
}
