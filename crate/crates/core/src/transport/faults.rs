//! Reproducible fault injection for data packets.
//!
//! Decisions are keyed by `(psn, attempt)` rather than by call order, so
//! two implementations replaying the same plan see the same faults even if
//! they transmit in a different order.
//!
//! Schedule file format, one entry per line, `#` starts a comment:
//!
//! ```text
//! <psn> <attempt> drop
//! <psn> <attempt> dup
//! <psn> <attempt> reorder <delay_ns>
//! ```
//!
//! `attempt` counts transmissions of that PSN starting at 0.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigError;
use crate::sim::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Deliver,
    Drop,
    /// Deliver twice; the copy arrives 1 ns after the original.
    Duplicate,
    /// Deliver late by the given extra delay.
    Delay(Nanos),
}

#[derive(Debug, Clone, Default)]
pub struct RandomFaults {
    pub seed: u64,
    pub loss: f64,
    pub reorder: f64,
    pub dup: f64,
    pub reorder_delay: Nanos,
}

#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    explicit: HashMap<(u32, u32), FaultAction>,
    random: Option<RandomFaults>,
}

fn mix(seed: u64, psn: u32, attempt: u32) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ ((psn as u64) << 20 | attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn random(r: RandomFaults) -> Self {
        FaultPlan {
            explicit: HashMap::new(),
            random: Some(r),
        }
    }

    pub fn set(&mut self, psn: u32, attempt: u32, action: FaultAction) -> &mut Self {
        self.explicit.insert((psn, attempt), action);
        self
    }

    /// Drops the first transmission of every PSN in `psns`.
    pub fn drops(psns: impl IntoIterator<Item = u32>) -> Self {
        let mut p = Self::none();
        for psn in psns {
            p.set(psn, 0, FaultAction::Drop);
        }
        p
    }

    pub fn decide(&self, psn: u32, attempt: u32) -> FaultAction {
        if let Some(a) = self.explicit.get(&(psn, attempt)) {
            return *a;
        }
        let Some(r) = &self.random else {
            return FaultAction::Deliver;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(r.seed, psn, attempt));
        let x: f64 = rng.gen();
        if x < r.loss {
            FaultAction::Drop
        } else if x < r.loss + r.reorder {
            FaultAction::Delay(r.reorder_delay)
        } else if x < r.loss + r.reorder + r.dup {
            FaultAction::Duplicate
        } else {
            FaultAction::Deliver
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut plan = Self::none();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let f: Vec<&str> = body.split_whitespace().collect();
            let num = |s: &str, what: &str| -> Result<u64, ConfigError> {
                s.parse().map_err(|_| ConfigError::Value {
                    line,
                    key: what.to_string(),
                    msg: format!("not an integer: {s}"),
                })
            };
            if f.len() < 3 {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "expected `<psn> <attempt> <op>`".into(),
                });
            }
            let psn = num(f[0], "psn")? as u32;
            let attempt = num(f[1], "attempt")? as u32;
            let action = match (f[2], f.len()) {
                ("drop", 3) => FaultAction::Drop,
                ("dup", 3) => FaultAction::Duplicate,
                ("reorder", 4) => FaultAction::Delay(num(f[3], "delay_ns")?),
                (op, _) => {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!("bad operation `{}`", op),
                    })
                }
            };
            plan.set(psn, attempt, action);
        }
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_schedule() {
        let p = FaultPlan::parse("# faults\n3 0 drop\n4 1 dup\n5 0 reorder 2500\n").unwrap();
        assert_eq!(p.decide(3, 0), FaultAction::Drop);
        assert_eq!(p.decide(3, 1), FaultAction::Deliver);
        assert_eq!(p.decide(4, 1), FaultAction::Duplicate);
        assert_eq!(p.decide(5, 0), FaultAction::Delay(2500));
        assert!(matches!(
            FaultPlan::parse("1 0 explode"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            FaultPlan::parse("x 0 drop"),
            Err(ConfigError::Value { line: 1, .. })
        ));
    }

    #[test]
    fn random_rates_and_determinism() {
        let p = FaultPlan::random(RandomFaults {
            seed: 7,
            loss: 0.01,
            reorder: 0.05,
            dup: 0.001,
            reorder_delay: 3000,
        });
        let n = 100_000;
        let drops = (0..n)
            .filter(|&psn| p.decide(psn, 0) == FaultAction::Drop)
            .count();
        assert!((800..1200).contains(&drops), "drops {drops}");
        assert_eq!(p.decide(42, 3), p.decide(42, 3));
    }
}
