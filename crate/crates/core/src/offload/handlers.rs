//! Reference handlers: pointer-chasing lookup and batched gather.

use super::{handler, DmaOp, Handler, OffloadCtx, OffloadEngine};

pub const KEY_BYTES: u64 = 8;
pub const VALUE_BYTES: u64 = 64;
/// key | value | next
pub const NODE_BYTES: u64 = KEY_BYTES + VALUE_BYTES + 8;
pub const MAX_HOPS: usize = 4096;

pub fn encode_node(
    key: u64,
    value: &[u8; VALUE_BYTES as usize],
    next: u64,
) -> [u8; NODE_BYTES as usize] {
    let mut n = [0u8; NODE_BYTES as usize];
    n[..8].copy_from_slice(&key.to_le_bytes());
    n[8..72].copy_from_slice(value);
    n[72..].copy_from_slice(&next.to_le_bytes());
    n
}

pub fn decode_node(raw: &[u8]) -> (u64, &[u8], u64) {
    let key = u64::from_le_bytes(raw[..8].try_into().unwrap());
    let next = u64::from_le_bytes(raw[72..80].try_into().unwrap());
    (key, &raw[8..72], next)
}

/// Value of the node with `key`, which is `key` repeated into 64 bytes.
pub fn value_for(key: u64) -> [u8; VALUE_BYTES as usize] {
    let mut v = [0u8; VALUE_BYTES as usize];
    for c in v.chunks_mut(8) {
        c.copy_from_slice(&key.to_le_bytes());
    }
    v
}

/// Writes a chain of nodes with keys `1..=len` at `addrs` and returns the head.
pub fn write_chain(engine: &mut OffloadEngine, addrs: &[u64]) -> u64 {
    for (i, &a) in addrs.iter().enumerate() {
        let next = addrs.get(i + 1).copied().unwrap_or(0);
        let key = i as u64 + 1;
        engine.host_write(a, &encode_node(key, &value_for(key), next));
    }
    addrs.first().copied().unwrap_or(0)
}

pub fn linked_list_request(head: u64, key: u64) -> Vec<u8> {
    [head.to_le_bytes(), key.to_le_bytes()].concat()
}

/// Walks the chain from `head` one DMA at a time. Responds with the value
/// on a hit and with an empty response on a miss, a fault or a malformed
/// request.
pub fn linked_list() -> Handler {
    handler(|ctx: OffloadCtx| async move {
        let req = ctx.request();
        if req.len() < 16 {
            let _ = ctx.submit_resp(0, 0);
            return;
        }
        let mut cur = u64::from_le_bytes(req[..8].try_into().unwrap());
        let want = u64::from_le_bytes(req[8..16].try_into().unwrap());
        let Ok(buf) = ctx.alloc_resp(NODE_BYTES) else {
            let _ = ctx.submit_resp(0, 0);
            return;
        };
        for _ in 0..MAX_HOPS {
            if cur == 0 {
                break;
            }
            let Ok(id) = ctx.submit_dma(DmaOp::Read, cur, buf, NODE_BYTES) else {
                break;
            };
            if ctx.wait_dma_finish(id).await.is_err() {
                break;
            }
            let raw = ctx.read_arm(buf, NODE_BYTES).unwrap_or_default();
            let (key, _, next) = decode_node(&raw);
            if key == want {
                let _ = ctx.submit_resp(buf + KEY_BYTES, VALUE_BYTES);
                return;
            }
            cur = next;
        }
        let _ = ctx.submit_resp(0, 0);
    })
}

pub fn batched_read_request(item_bytes: u32, addrs: &[u64]) -> Vec<u8> {
    let mut r = Vec::with_capacity(8 + 8 * addrs.len());
    r.extend_from_slice(&item_bytes.to_le_bytes());
    r.extend_from_slice(&(addrs.len() as u32).to_le_bytes());
    for a in addrs {
        r.extend_from_slice(&a.to_le_bytes());
    }
    r
}

/// Issues every READ before waiting on any, then answers with the items
/// concatenated in request order.
pub fn batched_read() -> Handler {
    handler(|ctx: OffloadCtx| async move {
        let req = ctx.request();
        let parsed = (req.len() >= 8).then(|| {
            let item = u32::from_le_bytes(req[..4].try_into().unwrap()) as u64;
            let n = u32::from_le_bytes(req[4..8].try_into().unwrap()) as usize;
            (item, n)
        });
        let Some((item, n)) =
            parsed.filter(|&(item, n)| item > 0 && n > 0 && req.len() >= 8 + 8 * n)
        else {
            let _ = ctx.submit_resp(0, 0);
            return;
        };
        let Ok(buf) = ctx.alloc_resp(item * n as u64) else {
            let _ = ctx.submit_resp(0, 0);
            return;
        };
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let host = u64::from_le_bytes(req[8 + 8 * i..16 + 8 * i].try_into().unwrap());
            if let Ok(id) = ctx.submit_dma(DmaOp::Read, host, buf + i as u64 * item, item) {
                ids.push(id);
            }
        }
        let mut ok = ids.len() == n;
        for id in ids {
            ok &= ctx.wait_dma_finish(id).await.is_ok();
        }
        let _ = if ok {
            ctx.submit_resp(buf, item * n as u64)
        } else {
            ctx.submit_resp(0, 0)
        };
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offload::EngineConfig;

    fn engine() -> OffloadEngine {
        let mut e = OffloadEngine::new(EngineConfig::new(1, 2)).unwrap();
        e.register_dma_region(0x10_0000, 1 << 20).unwrap();
        e.register_opcode(0x80, 1, linked_list()).unwrap();
        e.register_opcode(0x81, 1, batched_read()).unwrap();
        e
    }

    #[test]
    fn linked_list_hit_miss_and_hop_count() {
        let mut e = engine();
        let addrs: Vec<u64> = (0..5).map(|i| 0x10_0000 + (4 - i) * 0x1000).collect();
        let head = write_chain(&mut e, &addrs);
        e.deliver(0, 0x80, 1, linked_list_request(head, 5)).unwrap();
        e.run_until_idle(0);
        assert_eq!(e.take_responses()[0].payload, value_for(5));
        assert_eq!(e.stats().dmas, 5);
        e.deliver(0, 0x80, 1, linked_list_request(head, 42))
            .unwrap();
        e.run_until_idle(0);
        assert!(e.take_responses()[0].payload.is_empty());
    }

    #[test]
    fn linked_list_pointer_outside_region_ends_walk() {
        let mut e = engine();
        e.host_write(0x10_0000, &encode_node(1, &value_for(1), 0xdead_0000));
        e.deliver(0, 0x80, 1, linked_list_request(0x10_0000, 2))
            .unwrap();
        e.run_until_idle(0);
        let r = e.take_responses();
        assert!(r[0].payload.is_empty());
        assert_eq!(e.stats().dma_faults, 1);
    }

    #[test]
    fn batched_read_gathers_in_order() {
        let mut e = engine();
        let addrs: Vec<u64> = (0..64)
            .map(|i| 0x10_0000 + ((i * 37) % 64) * 0x100)
            .collect();
        for (i, &a) in addrs.iter().enumerate() {
            e.host_write(a, &[i as u8; 64]);
        }
        e.deliver(0, 0x81, 1, batched_read_request(64, &addrs))
            .unwrap();
        e.poll(0);
        let reqs = e.take_dma_requests();
        // all 64 READs are in flight before the first completes
        assert_eq!(reqs.len(), 64);
        for r in reqs.iter().rev() {
            e.complete_dma(r);
        }
        e.run_until_idle(0);
        let p = &e.take_responses()[0].payload;
        assert_eq!(p.len(), 64 * 64);
        for (i, c) in p.chunks(64).enumerate() {
            assert!(c.iter().all(|&b| b == i as u8));
        }
    }
}
