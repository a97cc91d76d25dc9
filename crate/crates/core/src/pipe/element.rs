//! Byte layout of a 64-byte pipe element.
//!
//! ```text
//! byte 0   bit 0     validity flag (compared against the consumer phase)
//!          bits 1-3  kind
//!          bits 4-7  kind-specific (RQE group: valid mask of the 4 entries)
//! bytes 1-63         body, little-endian multi-byte fields
//! ```

use super::PipeError;

pub const ELEMENT_BYTES: usize = 64;
pub const BODY_BYTES: usize = ELEMENT_BYTES - 1;
pub const RQE_BYTES: usize = 16;
pub const RQES_PER_GROUP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ElementKind {
    Sqe = 1,
    RqeGroup = 2,
    Cqe = 3,
    /// Continuation of an SQE carrying inline payload bytes.
    Inline = 4,
    /// Opaque record (offload hand-off, tests).
    Raw = 5,
}

impl ElementKind {
    fn from_bits(b: u8) -> Option<Self> {
        Some(match b {
            1 => ElementKind::Sqe,
            2 => ElementKind::RqeGroup,
            3 => ElementKind::Cqe,
            4 => ElementKind::Inline,
            5 => ElementKind::Raw,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PipeElement {
    pub kind: ElementKind,
    /// Upper nibble of byte 0.
    pub aux: u8,
    pub body: [u8; BODY_BYTES],
}

impl PipeElement {
    pub fn new(kind: ElementKind) -> Self {
        PipeElement {
            kind,
            aux: 0,
            body: [0; BODY_BYTES],
        }
    }

    pub fn raw(payload: &[u8]) -> Self {
        assert!(payload.len() <= BODY_BYTES);
        let mut e = Self::new(ElementKind::Raw);
        e.body[..payload.len()].copy_from_slice(payload);
        e
    }

    pub fn encode(&self, flag: bool) -> [u8; ELEMENT_BYTES] {
        let mut out = [0u8; ELEMENT_BYTES];
        out[0] = self.header_byte(flag);
        out[1..].copy_from_slice(&self.body);
        out
    }

    pub fn header_byte(&self, flag: bool) -> u8 {
        (flag as u8) | ((self.kind as u8) << 1) | ((self.aux & 0x0f) << 4)
    }

    /// Returns the flag and the element; fails on an unknown kind.
    pub fn decode(raw: &[u8; ELEMENT_BYTES]) -> Result<(bool, PipeElement), PipeError> {
        let flag = raw[0] & 1 == 1;
        let kind = ElementKind::from_bits((raw[0] >> 1) & 0x7).ok_or(PipeError::BadKind(raw[0]))?;
        let mut body = [0u8; BODY_BYTES];
        body.copy_from_slice(&raw[1..]);
        Ok((
            flag,
            PipeElement {
                kind,
                aux: raw[0] >> 4,
                body,
            },
        ))
    }

    /// Body bytes as they sit in the 64-byte record (offset 1 of the element).
    fn put(&mut self, elem_offset: usize, bytes: &[u8]) {
        self.body[elem_offset - 1..elem_offset - 1 + bytes.len()].copy_from_slice(bytes);
    }

    fn get<const N: usize>(&self, elem_offset: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.body[elem_offset - 1..elem_offset - 1 + N]);
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum WrOpcode {
    Send = 0,
    Write = 1,
    Read = 2,
    ReadResponse = 3,
    Recv = 4,
}

impl WrOpcode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => WrOpcode::Send,
            1 => WrOpcode::Write,
            2 => WrOpcode::Read,
            3 => WrOpcode::ReadResponse,
            4 => WrOpcode::Recv,
            _ => return None,
        })
    }
}

pub const SQE_SIGNALED: u8 = 1;
pub const SQE_INLINE: u8 = 2;

/// Send queue entry.
///
/// Element offsets: 1..9 wr_id, 9 opcode, 10 flags, 11..15 qp_id,
/// 15..23 local address (Arm VA), 23..27 length, 27..35 remote address,
/// 35..37 inline payload length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sqe {
    pub wr_id: u64,
    pub opcode: WrOpcode,
    pub flags: u8,
    pub qp_id: u32,
    pub local_addr: u64,
    pub length: u32,
    pub remote_addr: u64,
    pub inline_len: u16,
}

impl Sqe {
    pub fn to_element(&self) -> PipeElement {
        let mut e = PipeElement::new(ElementKind::Sqe);
        e.put(1, &self.wr_id.to_le_bytes());
        e.put(9, &[self.opcode as u8, self.flags]);
        e.put(11, &self.qp_id.to_le_bytes());
        e.put(15, &self.local_addr.to_le_bytes());
        e.put(23, &self.length.to_le_bytes());
        e.put(27, &self.remote_addr.to_le_bytes());
        e.put(35, &self.inline_len.to_le_bytes());
        e
    }

    pub fn from_element(e: &PipeElement) -> Result<Self, PipeError> {
        if e.kind != ElementKind::Sqe {
            return Err(PipeError::WrongKind {
                expected: ElementKind::Sqe,
                got: e.kind,
            });
        }
        let [op, flags] = e.get::<2>(9);
        Ok(Sqe {
            wr_id: u64::from_le_bytes(e.get(1)),
            opcode: WrOpcode::from_u8(op).ok_or(PipeError::BadField("opcode"))?,
            flags,
            qp_id: u32::from_le_bytes(e.get(11)),
            local_addr: u64::from_le_bytes(e.get(15)),
            length: u32::from_le_bytes(e.get(23)),
            remote_addr: u64::from_le_bytes(e.get(27)),
            inline_len: u16::from_le_bytes(e.get(35)),
        })
    }

    pub fn signaled(&self) -> bool {
        self.flags & SQE_SIGNALED != 0
    }
}

/// Splits an inline payload into continuation elements.
pub fn inline_elements(payload: &[u8]) -> Vec<PipeElement> {
    payload
        .chunks(BODY_BYTES)
        .map(|chunk| {
            let mut e = PipeElement::new(ElementKind::Inline);
            e.body[..chunk.len()].copy_from_slice(chunk);
            e
        })
        .collect()
}

pub fn inline_payload(elements: &[PipeElement], len: usize) -> Vec<u8> {
    let mut out: Vec<u8> = elements.iter().flat_map(|e| e.body).collect();
    out.truncate(len);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CqeStatus {
    Success = 0,
    LocalProtection = 1,
    RemoteAccess = 2,
    Flushed = 3,
    TransportRetry = 4,
}

impl CqeStatus {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => CqeStatus::Success,
            1 => CqeStatus::LocalProtection,
            2 => CqeStatus::RemoteAccess,
            3 => CqeStatus::Flushed,
            4 => CqeStatus::TransportRetry,
            _ => return None,
        })
    }
}

/// Completion entry. Element offsets: 1..9 wr_id, 9 status, 10 opcode,
/// 11..15 qp_id, 15..19 byte_len.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cqe {
    pub wr_id: u64,
    pub status: CqeStatus,
    pub opcode: WrOpcode,
    pub qp_id: u32,
    pub byte_len: u32,
}

impl Cqe {
    pub fn to_element(&self) -> PipeElement {
        let mut e = PipeElement::new(ElementKind::Cqe);
        e.put(1, &self.wr_id.to_le_bytes());
        e.put(9, &[self.status as u8, self.opcode as u8]);
        e.put(11, &self.qp_id.to_le_bytes());
        e.put(15, &self.byte_len.to_le_bytes());
        e
    }

    pub fn from_element(e: &PipeElement) -> Result<Self, PipeError> {
        if e.kind != ElementKind::Cqe {
            return Err(PipeError::WrongKind {
                expected: ElementKind::Cqe,
                got: e.kind,
            });
        }
        let [status, op] = e.get::<2>(9);
        Ok(Cqe {
            wr_id: u64::from_le_bytes(e.get(1)),
            status: CqeStatus::from_u8(status).ok_or(PipeError::BadField("status"))?,
            opcode: WrOpcode::from_u8(op).ok_or(PipeError::BadField("opcode"))?,
            qp_id: u32::from_le_bytes(e.get(11)),
            byte_len: u32::from_le_bytes(e.get(15)),
        })
    }
}

/// 16-byte receive entry. Entry offsets: 0 reserved (element header for
/// entry 0), 1..4 length (24 bit), 4..8 wr_id (32 bit), 8..16 address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rqe {
    pub wr_id: u32,
    pub addr: u64,
    pub length: u32,
}

pub const RQE_MAX_LEN: u32 = (1 << 24) - 1;

/// Packs up to four receive entries; absent entries are padding with a
/// cleared valid bit.
pub fn rqe_group(entries: &[Rqe]) -> PipeElement {
    assert!(entries.len() <= RQES_PER_GROUP && !entries.is_empty());
    let mut e = PipeElement::new(ElementKind::RqeGroup);
    for (i, r) in entries.iter().enumerate() {
        assert!(r.length <= RQE_MAX_LEN, "receive length exceeds 24 bits");
        let base = i * RQE_BYTES;
        e.put(base + 1, &r.length.to_le_bytes()[..3]);
        e.put(base + 4, &r.wr_id.to_le_bytes());
        e.put(base + 8, &r.addr.to_le_bytes());
        e.aux |= 1 << i;
    }
    e
}

pub fn rqe_entries(e: &PipeElement) -> Result<Vec<Rqe>, PipeError> {
    if e.kind != ElementKind::RqeGroup {
        return Err(PipeError::WrongKind {
            expected: ElementKind::RqeGroup,
            got: e.kind,
        });
    }
    let mut out = Vec::new();
    for i in 0..RQES_PER_GROUP {
        if e.aux & (1 << i) == 0 {
            continue;
        }
        let base = i * RQE_BYTES;
        let l: [u8; 3] = e.get(base + 1);
        out.push(Rqe {
            length: u32::from_le_bytes([l[0], l[1], l[2], 0]),
            wr_id: u32::from_le_bytes(e.get(base + 4)),
            addr: u64::from_le_bytes(e.get(base + 8)),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_byte_layout() {
        let e = PipeElement::new(ElementKind::Cqe);
        let raw = e.encode(true);
        assert_eq!(raw[0], 0b0000_0111);
        let (flag, back) = PipeElement::decode(&raw).unwrap();
        assert!(flag);
        assert_eq!(back, e);
        assert_eq!(PipeElement::decode(&[0u8; 64]), Err(PipeError::BadKind(0)));
    }

    #[test]
    fn sqe_fields_are_little_endian_at_fixed_offsets() {
        let s = Sqe {
            wr_id: 0x0102030405060708,
            opcode: WrOpcode::Write,
            flags: SQE_SIGNALED,
            qp_id: 7,
            local_addr: 0xAABB,
            length: 2048,
            remote_addr: 0x1000,
            inline_len: 0,
        };
        let raw = s.to_element().encode(false);
        assert_eq!(raw[1], 0x08);
        assert_eq!(raw[8], 0x01);
        assert_eq!(raw[9], WrOpcode::Write as u8);
        assert_eq!(&raw[23..27], &2048u32.to_le_bytes());
        let (_, e) = PipeElement::decode(&raw).unwrap();
        assert_eq!(Sqe::from_element(&e).unwrap(), s);
    }

    #[test]
    fn rqe_group_padding() {
        let rs: Vec<Rqe> = (0..3)
            .map(|i| Rqe {
                wr_id: i,
                addr: 0x1000 * i as u64,
                length: 4096,
            })
            .collect();
        let g = rqe_group(&rs);
        assert_eq!(g.aux, 0b0111);
        assert_eq!(rqe_entries(&g).unwrap(), rs);
        // Entry 0 shares byte 0 with the element header.
        let raw = g.encode(true);
        assert_eq!(raw[0] & 1, 1);
        assert_eq!(&raw[16 + 8..16 + 16], &0x1000u64.to_le_bytes());
    }

    #[test]
    fn inline_round_trip() {
        let payload: Vec<u8> = (0..100u8).collect();
        let els = inline_elements(&payload);
        assert_eq!(els.len(), 2);
        assert_eq!(inline_payload(&els, 100), payload);
    }
}
