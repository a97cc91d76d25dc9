//! Fluid bandwidth model.
//!
//! Every transfer is a fluid flow over a path of resources. Transfers with
//! an identical path signature form a class and always receive identical
//! rates. Rates follow max-min fairness (progressive filling), recomputed on
//! every join and leave, with one of two sharing units:
//!
//! * [`Fairness::PerClass`] (default): each class is one aggregate, like a
//!   switch arbitrating between traffic streams; its members split the
//!   class rate equally.
//! * [`Fairness::PerTransfer`]: every transfer is its own unit, so a class
//!   with more concurrent transfers gets a larger share.
//!
//! A path entry may carry a weight: a transfer moving at rate `r` consumes
//! `w * r` of that resource. Memory copies use weights to charge more than
//! one traversal of the DRAM per byte moved. Each class is served with a
//! virtual clock, so recomputation cost is independent of transfer count.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::Serialize;

use super::Nanos;

/// Completion slack in bytes when comparing fluid service to transfer size.
const EPS_BYTES: f64 = 1e-6;

fn slack(service: f64) -> f64 {
    EPS_BYTES.max(service.abs() * 1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ResourceId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransferId(pub u64);

pub fn gbps_to_bytes_per_ns(gbps: f64) -> f64 {
    gbps / 8.0
}

/// An ordered set of resources with per-resource weights and an optional
/// rate cap (offered load) in Gbps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Path {
    hops: Vec<(ResourceId, f64)>,
    cap_gbps: Option<f64>,
}

impl Path {
    pub fn new() -> Self {
        Path::default()
    }

    pub fn through(mut self, r: ResourceId) -> Self {
        self.add(r, 1.0);
        self
    }

    pub fn weighted(mut self, r: ResourceId, weight: f64) -> Self {
        self.add(r, weight);
        self
    }

    pub fn capped(mut self, gbps: f64) -> Self {
        self.cap_gbps = Some(gbps);
        self
    }

    pub fn add(&mut self, r: ResourceId, weight: f64) {
        if weight <= 0.0 {
            return;
        }
        match self.hops.iter_mut().find(|(id, _)| *id == r) {
            Some((_, w)) => *w += weight,
            None => self.hops.push((r, weight)),
        }
    }

    pub fn hops(&self) -> &[(ResourceId, f64)] {
        &self.hops
    }

    pub fn uses(&self, r: ResourceId) -> bool {
        self.hops.iter().any(|(id, _)| *id == r)
    }

    fn key(&self) -> ClassKey {
        let mut hops: Vec<(usize, u64)> =
            self.hops.iter().map(|(r, w)| (r.0, w.to_bits())).collect();
        hops.sort_unstable();
        ClassKey {
            hops,
            cap: self.cap_gbps.map(f64::to_bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ClassKey {
    hops: Vec<(usize, u64)>,
    cap: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Resource {
    pub name: String,
    pub capacity_gbps: f64,
    capacity: f64,
    load: f64,
    moved: f64,
}

impl Resource {
    /// Bytes pushed through this resource so far (weighted).
    pub fn bytes_moved(&self) -> f64 {
        self.moved
    }

    /// Instantaneous utilization in [0, 1].
    pub fn utilization(&self) -> f64 {
        self.load / self.capacity
    }
}

struct Class {
    hops: Vec<(usize, f64)>,
    cap: Option<f64>,
    /// Cumulative bytes served to each member since the class was created.
    service: f64,
    rate: f64,
    members: BinaryHeap<Reverse<(u64, u64)>>,
}

struct Transfer<E> {
    class: usize,
    start_service: f64,
    bytes: f64,
    extra_latency: Nanos,
    on_done: E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fairness {
    #[default]
    PerClass,
    PerTransfer,
}

pub struct Fabric<E> {
    fairness: Fairness,
    resources: Vec<Resource>,
    classes: Vec<Class>,
    class_index: HashMap<ClassKey, usize>,
    transfers: HashMap<u64, Transfer<E>>,
    next_id: u64,
    last_update: Nanos,
    dirty: bool,
}

impl<E> Default for Fabric<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Fabric<E> {
    pub fn new() -> Self {
        Fabric {
            fairness: Fairness::default(),
            resources: Vec::new(),
            classes: Vec::new(),
            class_index: HashMap::new(),
            transfers: HashMap::new(),
            next_id: 0,
            last_update: 0,
            dirty: false,
        }
    }

    pub fn fairness(&self) -> Fairness {
        self.fairness
    }

    pub fn set_fairness(&mut self, fairness: Fairness) {
        self.fairness = fairness;
        self.dirty = true;
    }

    pub fn add_resource(&mut self, name: impl Into<String>, capacity_gbps: f64) -> ResourceId {
        assert!(capacity_gbps > 0.0, "resource capacity must be positive");
        self.resources.push(Resource {
            name: name.into(),
            capacity_gbps,
            capacity: gbps_to_bytes_per_ns(capacity_gbps),
            load: 0.0,
            moved: 0.0,
        });
        ResourceId(self.resources.len() - 1)
    }

    pub fn resource(&self, id: ResourceId) -> &Resource {
        &self.resources[id.0]
    }

    pub fn resources(&self) -> impl Iterator<Item = (ResourceId, &Resource)> {
        self.resources
            .iter()
            .enumerate()
            .map(|(i, r)| (ResourceId(i), r))
    }

    pub fn active_transfers(&self) -> usize {
        self.transfers.len()
    }

    /// Current per-transfer rate in Gbps (0 if the transfer is gone).
    pub fn rate_gbps(&mut self, id: TransferId) -> f64 {
        self.refresh_rates();
        self.transfers
            .get(&id.0)
            .map(|t| self.classes[t.class].rate * 8.0)
            .unwrap_or(0.0)
    }

    /// Bytes already delivered for a live transfer.
    pub fn served_bytes(&self, id: TransferId) -> Option<f64> {
        self.transfers
            .get(&id.0)
            .map(|t| (self.classes[t.class].service - t.start_service).min(t.bytes))
    }

    /// Starts a transfer at `now`. `extra_latency` is added between fluid
    /// completion and the time `on_done` becomes due.
    pub fn start(
        &mut self,
        now: Nanos,
        path: &Path,
        bytes: u64,
        extra_latency: Nanos,
        on_done: E,
    ) -> TransferId {
        assert!(bytes > 0, "transfer of zero bytes");
        assert!(
            !path.hops.is_empty() || path.cap_gbps.is_some(),
            "transfer needs at least one resource or a rate cap"
        );
        assert_eq!(
            now, self.last_update,
            "fabric must be advanced to `now` before starting a transfer"
        );
        let key = path.key();
        let class = match self.class_index.get(&key) {
            Some(&c) => c,
            None => {
                self.classes.push(Class {
                    hops: path.hops.iter().map(|(r, w)| (r.0, *w)).collect(),
                    cap: path.cap_gbps.map(gbps_to_bytes_per_ns),
                    service: 0.0,
                    rate: 0.0,
                    members: BinaryHeap::new(),
                });
                self.class_index.insert(key, self.classes.len() - 1);
                self.classes.len() - 1
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        let c = &mut self.classes[class];
        let finish = c.service + bytes as f64;
        c.members.push(Reverse((finish.to_bits(), id)));
        self.transfers.insert(
            id,
            Transfer {
                class,
                start_service: c.service,
                bytes: bytes as f64,
                extra_latency,
                on_done,
            },
        );
        self.dirty = true;
        TransferId(id)
    }

    /// Earliest instant at which some transfer's fluid service completes.
    pub fn next_completion(&mut self) -> Option<Nanos> {
        self.refresh_rates();
        let mut best: Option<Nanos> = None;
        for c in &self.classes {
            let Some(Reverse((finish_bits, _))) = c.members.peek() else {
                continue;
            };
            if c.rate <= 0.0 {
                continue;
            }
            let remaining = (f64::from_bits(*finish_bits) - c.service).max(0.0);
            let dt = if remaining <= slack(c.service) {
                0
            } else {
                (remaining / c.rate).ceil() as Nanos
            };
            let t = self.last_update + dt;
            best = Some(best.map_or(t, |b| b.min(t)));
        }
        best
    }

    /// Integrates fluid progress up to `t` and returns completed transfers
    /// as `(due_time, on_done)` in completion order.
    pub fn advance(&mut self, t: Nanos) -> Vec<(Nanos, E)> {
        assert!(t >= self.last_update, "fabric clock moved backwards");
        self.refresh_rates();
        let dt = (t - self.last_update) as f64;
        if dt > 0.0 {
            for c in &mut self.classes {
                if !c.members.is_empty() {
                    c.service += c.rate * dt;
                }
            }
            for r in &mut self.resources {
                r.moved += r.load * dt;
            }
        }
        self.last_update = t;
        let mut done = Vec::new();
        for ci in 0..self.classes.len() {
            loop {
                let c = &mut self.classes[ci];
                let Some(Reverse((finish_bits, id))) = c.members.peek().copied() else {
                    break;
                };
                if f64::from_bits(finish_bits) - c.service > slack(c.service) {
                    break;
                }
                c.members.pop();
                // Fluid service ran past this transfer's size by less than one tick.
                let excess = (c.service - f64::from_bits(finish_bits)).max(0.0);
                for &(r, w) in &c.hops {
                    self.resources[r].moved -= excess * w;
                }
                let tr = self
                    .transfers
                    .remove(&id)
                    .expect("class member without transfer");
                done.push((id, t + tr.extra_latency, tr.on_done));
                self.dirty = true;
            }
            let c = &mut self.classes[ci];
            if c.members.is_empty() {
                c.service = 0.0;
            }
        }
        done.sort_by_key(|(id, due, _)| (*due, *id));
        done.into_iter().map(|(_, due, e)| (due, e)).collect()
    }

    fn refresh_rates(&mut self) {
        if !self.dirty {
            return;
        }
        self.dirty = false;
        let n_res = self.resources.len();
        let mut remaining: Vec<f64> = self.resources.iter().map(|r| r.capacity).collect();
        let mut frozen = vec![true; self.classes.len()];
        // Sharing units per class; the common level is the rate per unit.
        let mut units = vec![0.0; self.classes.len()];
        let mut members = vec![0.0; self.classes.len()];
        for (i, c) in self.classes.iter_mut().enumerate() {
            c.rate = 0.0;
            if !c.members.is_empty() {
                frozen[i] = false;
                members[i] = c.members.len() as f64;
                units[i] = match self.fairness {
                    Fairness::PerClass => 1.0,
                    Fairness::PerTransfer => members[i],
                };
            }
        }
        // Per-transfer cap expressed as a bound on the level.
        let level_cap = |i: usize, cap: f64| cap * members[i] / units[i];
        let mut level = 0.0f64;
        loop {
            // Coefficient of the common level on each resource.
            let mut coeff = vec![0.0; n_res];
            let mut any = false;
            for (i, c) in self.classes.iter().enumerate() {
                if frozen[i] {
                    continue;
                }
                any = true;
                for &(r, w) in &c.hops {
                    coeff[r] += units[i] * w;
                }
            }
            if !any {
                break;
            }
            let mut step = f64::INFINITY;
            for r in 0..n_res {
                if coeff[r] > 0.0 {
                    step = step.min(remaining[r].max(0.0) / coeff[r]);
                }
            }
            for (i, c) in self.classes.iter().enumerate() {
                if !frozen[i] {
                    if let Some(cap) = c.cap {
                        step = step.min((level_cap(i, cap) - level).max(0.0));
                    }
                }
            }
            assert!(step.is_finite(), "unbounded transfer rate");
            level += step;
            for r in 0..n_res {
                remaining[r] -= coeff[r] * step;
            }
            let saturated: Vec<bool> = (0..n_res)
                .map(|r| coeff[r] > 0.0 && remaining[r] <= self.resources[r].capacity * 1e-12)
                .collect();
            for (i, c) in self.classes.iter_mut().enumerate() {
                if frozen[i] {
                    continue;
                }
                let capped = c
                    .cap
                    .is_some_and(|cap| level >= level_cap(i, cap) * (1.0 - 1e-12));
                let blocked = c.hops.iter().any(|&(r, _)| saturated[r]);
                if capped || blocked {
                    frozen[i] = true;
                    c.rate = level * units[i] / members[i];
                }
            }
        }
        for r in &mut self.resources {
            r.load = 0.0;
        }
        for (i, c) in self.classes.iter().enumerate() {
            for &(r, w) in &c.hops {
                self.resources[r].load += members[i] * c.rate * w;
            }
        }
    }
}
