//! Shadow memory regions: Arm-side virtual aliases of host buffers.
//!
//! Arm VAs come from a per-context bump allocator and are never backed by
//! Arm memory; the NIC translates them back to host VAs on gather.

use std::collections::{BTreeMap, HashMap};

use super::TxError;

pub const SHADOW_BASE: u64 = 0x7f00_0000_0000;
const PAGE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowMemoryRegion {
    pub context_id: u32,
    pub host_va: u64,
    pub arm_va: u64,
    pub size: u64,
}

impl ShadowMemoryRegion {
    pub fn contains_arm(&self, arm_va: u64, len: u64) -> bool {
        arm_va >= self.arm_va && arm_va.saturating_add(len) <= self.arm_va + self.size
    }
}

#[derive(Debug, Default)]
struct ContextRegions {
    next_va: u64,
    by_arm: BTreeMap<u64, ShadowMemoryRegion>,
}

#[derive(Debug, Default)]
pub struct ShadowTable {
    contexts: HashMap<u32, ContextRegions>,
}

impl ShadowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        context_id: u32,
        host_va: u64,
        size: u64,
    ) -> Result<ShadowMemoryRegion, TxError> {
        if size == 0 {
            return Err(TxError::ZeroSize);
        }
        let ctx = self
            .contexts
            .entry(context_id)
            .or_insert_with(|| ContextRegions {
                next_va: SHADOW_BASE,
                by_arm: BTreeMap::new(),
            });
        let end = host_va.checked_add(size).ok_or(TxError::ZeroSize)?;
        if ctx
            .by_arm
            .values()
            .any(|r| host_va < r.host_va + r.size && r.host_va < end)
        {
            return Err(TxError::Overlap {
                context_id,
                host_va,
            });
        }
        let region = ShadowMemoryRegion {
            context_id,
            host_va,
            arm_va: ctx.next_va,
            size,
        };
        ctx.next_va += size.div_ceil(PAGE) * PAGE;
        ctx.by_arm.insert(region.arm_va, region);
        Ok(region)
    }

    pub fn deregister(
        &mut self,
        context_id: u32,
        arm_va: u64,
    ) -> Result<ShadowMemoryRegion, TxError> {
        self.contexts
            .get_mut(&context_id)
            .and_then(|c| c.by_arm.remove(&arm_va))
            .ok_or(TxError::Fault {
                context_id,
                arm_va,
                len: 0,
            })
    }

    pub fn region(
        &self,
        context_id: u32,
        arm_va: u64,
        len: u64,
    ) -> Result<&ShadowMemoryRegion, TxError> {
        self.contexts
            .get(&context_id)
            .and_then(|c| c.by_arm.range(..=arm_va).next_back())
            .map(|(_, r)| r)
            .filter(|r| r.contains_arm(arm_va, len))
            .ok_or(TxError::Fault {
                context_id,
                arm_va,
                len,
            })
    }

    /// Host VA behind `arm_va..arm_va+len`, which must lie in one region.
    pub fn translate(&self, context_id: u32, arm_va: u64, len: u64) -> Result<u64, TxError> {
        let r = self.region(context_id, arm_va, len)?;
        Ok(r.host_va + (arm_va - r.arm_va))
    }

    pub fn regions(&self, context_id: u32) -> impl Iterator<Item = &ShadowMemoryRegion> {
        self.contexts
            .get(&context_id)
            .into_iter()
            .flat_map(|c| c.by_arm.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translate_round_trip() {
        let mut t = ShadowTable::new();
        let r = t.register(1, 0x10000, 4096).unwrap();
        assert_eq!(t.translate(1, r.arm_va, 1).unwrap(), 0x10000);
        assert_eq!(t.translate(1, r.arm_va + 100, 50).unwrap(), 0x10064);
        assert!(matches!(
            t.translate(1, r.arm_va + 4000, 200),
            Err(TxError::Fault { .. })
        ));
        assert!(matches!(
            t.translate(2, r.arm_va, 1),
            Err(TxError::Fault { .. })
        ));
    }

    #[test]
    fn regions_are_disjoint_and_host_overlap_rejected() {
        let mut t = ShadowTable::new();
        let a = t.register(1, 0x10000, 5000).unwrap();
        let b = t.register(1, 0x20000, 100).unwrap();
        assert!(a.arm_va + a.size <= b.arm_va);
        assert!(matches!(
            t.register(1, 0x10100, 16),
            Err(TxError::Overlap { .. })
        ));
        assert!(t.register(2, 0x10100, 16).is_ok());
        assert_eq!(t.register(1, 0x30000, 0), Err(TxError::ZeroSize));
    }

    #[test]
    fn unregistered_va_faults() {
        let mut t = ShadowTable::new();
        assert!(t.translate(1, SHADOW_BASE, 1).is_err());
        let r = t.register(1, 0x1000, 64).unwrap();
        t.deregister(1, r.arm_va).unwrap();
        assert!(t.translate(1, r.arm_va, 1).is_err());
    }
}
