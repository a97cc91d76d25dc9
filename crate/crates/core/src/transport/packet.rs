//! Wire packets, the 64-byte header codec and MTU segmentation.
//!
//! Header layout (little-endian):
//!
//! ```text
//! 0      opcode
//! 1      flags (bit 0 first segment, bit 1 last segment, bit 2 ECN mark)
//! 2..6   qp_id
//! 6..10  psn
//! 10..12 length (payload bytes in this packet)
//! 12..14 udp_src_port
//! 14..22 remote_addr
//! 22..26 msg_len (whole-message length; READ requests use it as read size)
//! 26..64 reserved, zero
//! ```

use thiserror::Error;

pub const HEADER_BYTES: usize = 64;
pub const DEFAULT_MTU: u32 = 4096;
pub const DEFAULT_UDP_PORT: u16 = 49152;

pub const FLAG_FIRST: u8 = 1;
pub const FLAG_LAST: u8 = 2;
pub const FLAG_ECN: u8 = 4;

/// First opcode value available to user-registered handlers.
pub const CUSTOM_OPCODE_BASE: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Send,
    Write,
    ReadRequest,
    ReadResponse,
    Ack,
    Nak,
    Cnp,
    /// Unused-by-transport opcode, `>= CUSTOM_OPCODE_BASE`.
    Custom(u8),
}

impl Opcode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => Opcode::Send,
            1 => Opcode::Write,
            2 => Opcode::ReadRequest,
            3 => Opcode::ReadResponse,
            4 => Opcode::Ack,
            5 => Opcode::Nak,
            6 => Opcode::Cnp,
            b if b >= CUSTOM_OPCODE_BASE => Opcode::Custom(b),
            _ => return None,
        })
    }

    pub fn to_u8(self) -> u8 {
        match self {
            Opcode::Send => 0,
            Opcode::Write => 1,
            Opcode::ReadRequest => 2,
            Opcode::ReadResponse => 3,
            Opcode::Ack => 4,
            Opcode::Nak => 5,
            Opcode::Cnp => 6,
            Opcode::Custom(b) => b,
        }
    }

    pub fn is_feedback(self) -> bool {
        matches!(self, Opcode::Ack | Opcode::Nak | Opcode::Cnp)
    }

    pub fn sprayable(self) -> bool {
        matches!(
            self,
            Opcode::Write | Opcode::ReadRequest | Opcode::ReadResponse
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("header needs {HEADER_BYTES} bytes, got {0}")]
    Short(usize),
    #[error("unknown opcode {0}")]
    Opcode(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub opcode: Opcode,
    pub flags: u8,
    pub qp_id: u32,
    pub psn: u32,
    pub length: u16,
    pub udp_src_port: u16,
    pub remote_addr: u64,
    pub msg_len: u32,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn control(opcode: Opcode, qp_id: u32, psn: u32) -> Self {
        Packet {
            opcode,
            flags: FLAG_FIRST | FLAG_LAST,
            qp_id,
            psn,
            length: 0,
            udp_src_port: DEFAULT_UDP_PORT,
            remote_addr: 0,
            msg_len: 0,
            payload: Vec::new(),
        }
    }

    pub fn is_first(&self) -> bool {
        self.flags & FLAG_FIRST != 0
    }

    pub fn is_last(&self) -> bool {
        self.flags & FLAG_LAST != 0
    }

    pub fn ecn(&self) -> bool {
        self.flags & FLAG_ECN != 0
    }

    pub fn wire_bytes(&self) -> u64 {
        (HEADER_BYTES + self.length as usize) as u64
    }

    pub fn encode_header(&self) -> [u8; HEADER_BYTES] {
        let mut h = [0u8; HEADER_BYTES];
        h[0] = self.opcode.to_u8();
        h[1] = self.flags;
        h[2..6].copy_from_slice(&self.qp_id.to_le_bytes());
        h[6..10].copy_from_slice(&self.psn.to_le_bytes());
        h[10..12].copy_from_slice(&self.length.to_le_bytes());
        h[12..14].copy_from_slice(&self.udp_src_port.to_le_bytes());
        h[14..22].copy_from_slice(&self.remote_addr.to_le_bytes());
        h[22..26].copy_from_slice(&self.msg_len.to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.encode_header().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, PacketError> {
        if bytes.len() < HEADER_BYTES {
            return Err(PacketError::Short(bytes.len()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let length = u16_at(10);
        Ok(Packet {
            opcode: Opcode::from_u8(bytes[0]).ok_or(PacketError::Opcode(bytes[0]))?,
            flags: bytes[1],
            qp_id: u32_at(2),
            psn: u32_at(6),
            length,
            udp_src_port: u16_at(12),
            remote_addr: u64::from_le_bytes(bytes[14..22].try_into().unwrap()),
            msg_len: u32_at(22),
            payload: bytes[HEADER_BYTES..].to_vec(),
        })
    }
}

/// Splits a message into MTU-sized packets with consecutive PSNs starting
/// at `first_psn`. Zero-length messages still produce one packet.
pub fn segment(
    opcode: Opcode,
    qp_id: u32,
    first_psn: u32,
    payload: &[u8],
    remote_addr: u64,
    mtu: u32,
) -> Vec<Packet> {
    let mtu = mtu as usize;
    let n = payload.len().div_ceil(mtu).max(1);
    (0..n)
        .map(|i| {
            let chunk = &payload[(i * mtu).min(payload.len())..((i + 1) * mtu).min(payload.len())];
            let mut flags = 0;
            if i == 0 {
                flags |= FLAG_FIRST;
            }
            if i == n - 1 {
                flags |= FLAG_LAST;
            }
            Packet {
                opcode,
                flags,
                qp_id,
                psn: first_psn.wrapping_add(i as u32),
                length: chunk.len() as u16,
                udp_src_port: DEFAULT_UDP_PORT,
                remote_addr: remote_addr + (i * mtu) as u64,
                msg_len: payload.len() as u32,
                payload: chunk.to_vec(),
            }
        })
        .collect()
}

/// Source port for `psn` under per-PSN round-robin spraying over `paths`.
pub fn spray_port(base: u16, psn: u32, paths: u16) -> u16 {
    base.wrapping_add((psn % paths.max(1) as u32) as u16)
}
